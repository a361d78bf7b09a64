//! Encoder, reconstruction decoder, and classification head.

use rand::Rng as _;

use super::block::{init_standard_block, init_structural_block, standard_block, structural_block, BlockGeometry};
use super::config::ModelConfig;
use super::embed;
use super::light_conv::NeighborPlan;
use crate::error::{arg_err, dim_err, Result};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{CustomOp, ParamStore, Rng, Tape, Tensor, Var};
use crate::pointops::{centroids, GroupedTokens, PointCloud};

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const CLS: &str = "cls";

/// Hidden width of the decoder's center embedding and the classification head.
pub const POS_HIDDEN: usize = 128;
pub const CLS_HIDDEN: usize = 256;

pub fn init_encoder(ps: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) {
    embed::init(ps, rng, &format!("{ENCODER}.embed"), cfg.width);
    ps.init_linear(rng, &format!("{ENCODER}.phi_h"), 3, cfg.width, true);
    for i in 0..cfg.depth {
        init_structural_block(ps, rng, &format!("{ENCODER}.blocks.{i}"), cfg.width, cfg.inner, cfg.states);
    }
}

pub fn init_decoder(ps: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig) {
    let d = cfg.width;
    let token = (0..d).map(|_| rng.gen_range(-0.02..0.02)).collect();
    ps.insert(format!("{DECODER}.mask_token"), Tensor::new(&[1, d], token).expect("1 x d"));
    ps.init_linear(rng, &format!("{DECODER}.pos.0"), 3, POS_HIDDEN, true);
    ps.init_linear(rng, &format!("{DECODER}.pos.1"), POS_HIDDEN, d, true);
    for i in 0..cfg.decoder_depth {
        init_standard_block(ps, rng, &format!("{DECODER}.blocks.{i}"), d, cfg.inner, cfg.states);
    }
    ps.init_linear(rng, &format!("{DECODER}.head"), d, cfg.group_size * 3, true);
}

/// Encoder and decoder parameters drawn from the config seed.
pub fn init_model(cfg: &ModelConfig) -> ParamStore {
    let mut ps = ParamStore::new();
    init_encoder(&mut ps, &mut seeded(derive_seed(cfg.seed, &[1])), cfg);
    init_decoder(&mut ps, &mut seeded(derive_seed(cfg.seed, &[2])), cfg);
    ps
}

pub fn init_cls_head(ps: &mut ParamStore, rng: &mut Rng, d: usize, n_cls: usize) {
    ps.init_linear(rng, &format!("{CLS}.fc1"), 2 * d, CLS_HIDDEN, true);
    ps.init_linear(rng, &format!("{CLS}.fc2"), CLS_HIDDEN, CLS_HIDDEN, true);
    ps.init_linear(rng, &format!("{CLS}.out"), CLS_HIDDEN, n_cls, true);
}

fn linear(tape: &mut Tape, ps: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let w = tape.param(ps, &format!("{path}.weight"))?;
    let b = tape.param(ps, &format!("{path}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// State positions for a cloud: centroids of `M` FPS-seeded regions.
pub fn state_positions(cloud: &PointCloud, cfg: &ModelConfig) -> Result<Tensor> {
    centroids(cloud, cfg.states, 0)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[N, D]`
    pub tokens: Var,
    /// `[M, D]`
    pub states: Var,
}

/// Embeds the groups, initializes states from their positions, and runs the block stack.
pub fn encoder(tape: &mut Tape, ps: &ParamStore, cfg: &ModelConfig, grouped: &GroupedTokens, state_pos: &Tensor) -> Result<EncoderOutput> {
    if state_pos.shape() != [cfg.states, 3] {
        return Err(dim_err!("encoder: state positions {:?}, expected [{}, 3]", state_pos.shape(), cfg.states));
    }
    let mut fx = embed::token_embed(tape, ps, &format!("{ENCODER}.embed"), &grouped.grouped_points)?;
    let pos = tape.constant(state_pos.clone());
    let mut fh = linear(tape, ps, &format!("{ENCODER}.phi_h"), pos)?;
    if cfg.depth > 0 {
        let geo = BlockGeometry::new(&grouped.centers, state_pos, cfg.k_x, cfg.k_h)?;
        for i in 0..cfg.depth {
            (fx, fh) = structural_block(tape, ps, &format!("{ENCODER}.blocks.{i}"), fx, fh, &geo)?;
        }
    }
    Ok(EncoderOutput { tokens: fx, states: fh })
}

/// Reconstructs the masked groups as `[n_masked, K, 3]` coordinates relative
/// to their centers, or `None` when nothing is masked.
///
/// `visible` holds the encoder tokens of `visible_idx` in that order; the
/// sequence is rebuilt in original group order with a mask token plus a
/// center embedding at each masked position.
pub fn decoder(
    tape: &mut Tape,
    ps: &ParamStore,
    cfg: &ModelConfig,
    visible: Var,
    centers: &Tensor,
    visible_idx: &[usize],
    masked_idx: &[usize],
) -> Result<Option<Var>> {
    let n = centers.rows();
    if visible_idx.len() + masked_idx.len() != n || tape.value(visible).rows() != visible_idx.len() {
        return Err(arg_err!(
            "decoder: {} visible + {} masked indices for {n} groups and {} visible tokens",
            visible_idx.len(),
            masked_idx.len(),
            tape.value(visible).rows()
        ));
    }
    if masked_idx.is_empty() {
        return Ok(None);
    }
    let nm = masked_idx.len();
    let token = tape.param(ps, &format!("{DECODER}.mask_token"))?;
    let tokens = tape.gather_rows(token, &vec![0; nm])?;
    let mc = tape.constant(centers.select_rows(masked_idx));
    let pe = linear(tape, ps, &format!("{DECODER}.pos.0"), mc)?;
    let pe = tape.silu(pe);
    let pe = linear(tape, ps, &format!("{DECODER}.pos.1"), pe)?;
    let masked = tape.add(tokens, pe)?;

    let mut slot = vec![usize::MAX; n];
    for (row, &g) in visible_idx.iter().chain(masked_idx).enumerate() {
        if g >= n || slot[g] != usize::MAX {
            return Err(arg_err!("decoder: group index {g} repeated or out of range"));
        }
        slot[g] = row;
    }
    let joint = tape.concat_rows(&[visible, masked])?;
    let mut x = tape.gather_rows(joint, &slot)?;

    let plan = NeighborPlan::clamped(centers, cfg.k_x)?;
    for i in 0..cfg.decoder_depth {
        x = standard_block(tape, ps, &format!("{DECODER}.blocks.{i}"), x, &plan)?;
    }
    let rows = tape.gather_rows(x, masked_idx)?;
    let pred = linear(tape, ps, &format!("{DECODER}.head"), rows)?;
    Ok(Some(tape.reshape(pred, &[nm, cfg.group_size, 3])?))
}

/// Class logits `[n_cls]` from max- and mean-pooled tokens `[N, D]`.
pub fn cls_head(tape: &mut Tape, ps: &ParamStore, tokens: Var) -> Result<Var> {
    let (n, d) = (tape.value(tokens).rows(), tape.value(tokens).last_dim());
    let t = tape.reshape(tokens, &[1, n, d])?;
    let mx = tape.max_pool(t)?;
    let mn = tape.mean_pool(t)?;
    let x = tape.concat_cols(mx, mn)?;
    let x = linear(tape, ps, &format!("{CLS}.fc1"), x)?;
    let x = tape.silu(x);
    let x = linear(tape, ps, &format!("{CLS}.fc2"), x)?;
    let x = tape.silu(x);
    let x = linear(tape, ps, &format!("{CLS}.out"), x)?;
    let c = tape.value(x).numel();
    tape.reshape(x, &[c])
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let l = tape.value(logits);
    if l.rank() != 1 || label >= l.numel() {
        return Err(arg_err!("cross_entropy: label {label} for logits {:?}", l.shape()));
    }
    let max = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = Tensor::scalar(lse - l.data()[label]);
    Ok(tape.custom(&[logits], loss, Box::new(CrossEntropy { label })))
}

struct CrossEntropy {
    label: usize,
}

impl CustomOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut p = inputs[0].data().to_vec();
        crate::numerics::softmax_in_place(&mut p);
        p[self.label] -= 1.0;
        vec![Some(p.into_iter().map(|v| v * grad[0]).collect())]
    }
}
