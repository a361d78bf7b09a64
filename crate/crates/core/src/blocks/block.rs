//! The structural scan block and the plain selective-scan block of the decoder.

use super::light_conv::{self, NeighborPlan};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var, LN_EPS};
use crate::sscan::layer::{init_standard, init_structural, standard_layer, structural_direction};
use crate::sscan::{offsets, Direction};

/// Position-derived inputs shared by every structural block of one forward pass.
#[derive(Clone, Debug)]
pub struct BlockGeometry {
    /// `[N, M, 3]` token-center minus state-position offsets.
    pub offsets: Tensor,
    pub tokens: NeighborPlan,
    pub states: NeighborPlan,
}

impl BlockGeometry {
    /// Neighbor counts are clamped to the number of available elements.
    pub fn new(centers: &Tensor, state_pos: &Tensor, k_x: usize, k_h: usize) -> Result<Self> {
        Ok(Self {
            offsets: offsets(centers, state_pos)?,
            tokens: NeighborPlan::clamped(centers, k_x)?,
            states: NeighborPlan::clamped(state_pos, k_h)?,
        })
    }
}

fn linear(tape: &mut Tape, ps: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let w = tape.param(ps, &format!("{path}.weight"))?;
    let b = tape.param(ps, &format!("{path}.bias"))?;
    tape.linear(x, w, Some(b))
}

fn norm(tape: &mut Tape, ps: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let g = tape.param(ps, &format!("{path}.gamma"))?;
    let b = tape.param(ps, &format!("{path}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    match tape.value(v).data().iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!("{what}: non-finite value at flat index {i}"))),
    }
}

pub fn init_structural_block(ps: &mut ParamStore, rng: &mut Rng, p: &str, d: usize, e: usize, m: usize) {
    ps.init_norm(&format!("{p}.norm_x"), d);
    ps.init_norm(&format!("{p}.norm_h"), d);
    for name in ["lin_x", "lin_z", "lin_h"] {
        ps.init_linear(rng, &format!("{p}.{name}"), d, e, true);
    }
    light_conv::init(ps, rng, &format!("{p}.conv_x"), e);
    light_conv::init(ps, rng, &format!("{p}.conv_h"), e);
    init_structural(ps, rng, &format!("{p}.ssm_f"), e, m);
    init_structural(ps, rng, &format!("{p}.ssm_b"), e, m);
    ps.init_linear(rng, &format!("{p}.lin_out"), e, d, true);
    ps.init_linear(rng, &format!("{p}.lin_hout"), e, d, true);
}

/// One structural block: `(F_x: [N, D], F_h: [M, D]) -> (F'_x, F'_h)`.
pub fn structural_block(tape: &mut Tape, ps: &ParamStore, p: &str, fx: Var, fh: Var, geo: &BlockGeometry) -> Result<(Var, Var)> {
    let xn = norm(tape, ps, &format!("{p}.norm_x"), fx)?;
    let hn = norm(tape, ps, &format!("{p}.norm_h"), fh)?;
    let x = linear(tape, ps, &format!("{p}.lin_x"), xn)?;
    let z = linear(tape, ps, &format!("{p}.lin_z"), xn)?;
    let h = linear(tape, ps, &format!("{p}.lin_h"), hn)?;
    let x_hat = light_conv::light_conv(tape, ps, &format!("{p}.conv_x"), x, &geo.tokens)?;
    let h_hat = light_conv::light_conv(tape, ps, &format!("{p}.conv_h"), h, &geo.states)?;

    let (y_f, s_f) = structural_direction(tape, ps, &format!("{p}.ssm_f"), x_hat, h_hat, &geo.offsets, Direction::Forward)?;
    let (y_b, s_b) = structural_direction(tape, ps, &format!("{p}.ssm_b"), x_hat, h_hat, &geo.offsets, Direction::Backward)?;

    let gate = tape.silu(z);
    let y = tape.add(y_f, y_b)?;
    let y = tape.mul(y, gate)?;
    let y = linear(tape, ps, &format!("{p}.lin_out"), y)?;
    let fx_out = tape.add(y, fx)?;

    let s = tape.add(s_f, s_b)?;
    let s = linear(tape, ps, &format!("{p}.lin_hout"), s)?;
    let fh_out = tape.add(s, fh)?;

    check_finite(tape, fx_out, &format!("{p} token output"))?;
    check_finite(tape, fh_out, &format!("{p} state output"))?;
    Ok((fx_out, fh_out))
}

pub fn init_standard_block(ps: &mut ParamStore, rng: &mut Rng, p: &str, d: usize, e: usize, m: usize) {
    ps.init_norm(&format!("{p}.norm"), d);
    ps.init_linear(rng, &format!("{p}.lin_x"), d, e, true);
    ps.init_linear(rng, &format!("{p}.lin_z"), d, e, true);
    light_conv::init(ps, rng, &format!("{p}.conv"), e);
    init_standard(ps, rng, &format!("{p}.ssm"), e, m);
    ps.init_linear(rng, &format!("{p}.lin_out"), e, d, true);
}

/// Decoder block: gated selective scan from a zero state, with the light
/// convolution over token centers in place of a causal convolution.
pub fn standard_block(tape: &mut Tape, ps: &ParamStore, p: &str, fx: Var, plan: &NeighborPlan) -> Result<Var> {
    let xn = norm(tape, ps, &format!("{p}.norm"), fx)?;
    let x = linear(tape, ps, &format!("{p}.lin_x"), xn)?;
    let z = linear(tape, ps, &format!("{p}.lin_z"), xn)?;
    let x_hat = light_conv::light_conv(tape, ps, &format!("{p}.conv"), x, plan)?;
    let y = standard_layer(tape, ps, &format!("{p}.ssm"), x_hat)?;
    let gate = tape.silu(z);
    let y = tape.mul(y, gate)?;
    let y = linear(tape, ps, &format!("{p}.lin_out"), y)?;
    let out = tape.add(y, fx)?;
    check_finite(tape, out, &format!("{p} output"))?;
    Ok(out)
}
