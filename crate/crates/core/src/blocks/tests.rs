use proptest::prelude::*;

use super::block::init_structural_block;
use super::light_conv::{init as init_conv, neighbor_weights, weighted_rows};
use super::model::{init_decoder, init_encoder};
use super::*;
use crate::error::{Error, Result};
use crate::numerics::rng::{seeded, uniform};
use crate::numerics::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use crate::pointops::{group, synth_shape, ShapeKind};

fn zero_where(ps: &ParamStore, pred: impl Fn(&str) -> bool) -> ParamStore {
    let mut out = ps.clone();
    for (p, t) in out.iter_mut() {
        if pred(p) {
            *t = Tensor::zeros(t.shape());
        }
    }
    out
}

fn conv_setup(q: usize, e: usize, seed: u64) -> (ParamStore, Tensor, Tensor) {
    let mut rng = seeded(seed);
    let mut ps = ParamStore::new();
    init_conv(&mut ps, &mut rng, "c", e);
    (ps, uniform(&mut rng, &[q, e], -1.0, 1.0), uniform(&mut rng, &[q, 3], -1.0, 1.0))
}

fn run_conv(ps: &ParamStore, feats: &Tensor, pos: &Tensor, k: usize) -> Tensor {
    let plan = NeighborPlan::new(pos, k).unwrap();
    let mut t = Tape::no_grad();
    let f = t.constant(feats.clone());
    let y = light_conv(&mut t, ps, "c", f, &plan).unwrap();
    t.value(y).clone()
}

#[test]
fn light_conv_examples() {
    let (ps, feats, pos) = conv_setup(10, 6, 1);

    // identical features: the convex combination is the feature itself
    let same = Tensor::new(&[10, 6], feats.row(0).repeat(10)).unwrap();
    let y = run_conv(&ps, &same, &pos, 4);
    let mut t = Tape::no_grad();
    let f = t.constant(same.select_rows(&[0]));
    let w = t.param(&ps, "c.phi_c.weight").unwrap();
    let b = t.param(&ps, "c.phi_c.bias").unwrap();
    let direct = t.linear(f, w, Some(b)).unwrap();
    let direct = t.silu(direct);
    for r in 0..10 {
        for (a, b) in y.row(r).iter().zip(t.value(direct).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // zero weight network: uniform weights
    let flat = zero_where(&ps, |p| p.contains("phi_w"));
    let plan = NeighborPlan::new(&pos, 4).unwrap();
    let mut t = Tape::no_grad();
    let w = neighbor_weights(&mut t, &flat, "c", &plan).unwrap();
    assert!(t.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    assert!(matches!(NeighborPlan::new(&pos, 11), Err(Error::Argument(_))));
    assert_eq!(NeighborPlan::clamped(&pos, 11).unwrap().k, 10);
    // every element is its own nearest neighbor
    assert!((0..10).all(|m| plan.index[m * 4] == m));
}

#[test]
fn light_conv_full_neighborhood_is_permutation_equivariant() {
    let (ps, feats, pos) = conv_setup(7, 5, 2);
    let perm = [3usize, 6, 0, 2, 5, 1, 4];
    let y = run_conv(&ps, &feats, &pos, 7);
    let yp = run_conv(&ps, &feats.select_rows(&perm), &pos.select_rows(&perm), 7);
    assert!(y.select_rows(&perm).max_abs_diff(&yp) <= 1e-12);
}

#[test]
fn light_conv_absolute_term_breaks_translation_invariance() {
    let (ps, feats, pos) = conv_setup(12, 4, 3);
    let moved = pos.map(|v| v + 0.75);
    let y = run_conv(&ps, &feats, &pos, 5);
    let ym = run_conv(&ps, &feats, &moved, 5);
    assert!(y.max_abs_diff(&ym) > 1e-6);
}

#[test]
fn gradcheck_light_conv() {
    let (mut ps, feats, pos) = conv_setup(9, 4, 4);
    ps.insert("f", feats);
    let plan = NeighborPlan::new(&pos, 3).unwrap();
    let opts = GradCheckOptions { tol: 1e-6, full_limit: 16, probes: 6, ..Default::default() };
    let f = |t: &mut Tape, ps: &ParamStore| {
        let x = t.param(ps, "f")?;
        let y = light_conv(t, ps, "c", x, &plan)?;
        let y = t.square(y);
        Ok(t.sum(y))
    };
    let report = grad_check(f, &ps, &opts).unwrap();
    assert!(report.passed(), "{:#?}", report.params);
}

#[test]
fn gradcheck_weighted_rows() {
    let mut rng = seeded(5);
    let mut ps = ParamStore::new();
    ps.insert("x", uniform(&mut rng, &[4, 3], -1.0, 1.0));
    ps.insert("w", uniform(&mut rng, &[5, 2], -1.0, 1.0));
    let index = [0usize, 1, 3, 3, 2, 0, 1, 1, 0, 2];
    let f = |t: &mut Tape, ps: &ParamStore| {
        let x = t.param(ps, "x")?;
        let w = t.param(ps, "w")?;
        let y = weighted_rows(t, x, w, &index)?;
        let y = t.square(y);
        Ok(t.sum(y))
    };
    let report = grad_check(f, &ps, &GradCheckOptions { tol: 1e-7, ..Default::default() }).unwrap();
    assert!(report.passed(), "{:#?}", report.params);
}

fn tiny_cloud_groups(cfg: &ModelConfig, seed: u64) -> (crate::pointops::PointCloud, crate::pointops::GroupedTokens, Tensor) {
    let cloud = synth_shape(ShapeKind::Torus, 128, seed).unwrap();
    let g = group(&cloud, cfg.groups, cfg.group_size, 0).unwrap();
    let sp = state_positions(&cloud, cfg).unwrap();
    (cloud, g, sp)
}

#[test]
fn embed_is_invariant_to_point_order_within_groups() {
    let cfg = ModelConfig::tiny();
    let (_, g, _) = tiny_cloud_groups(&cfg, 1);
    let mut ps = ParamStore::new();
    super::embed::init(&mut ps, &mut seeded(6), "e", cfg.width);
    let embed = |pts: &Tensor| {
        let mut t = Tape::no_grad();
        let v = super::embed::token_embed(&mut t, &ps, "e", pts).unwrap();
        t.value(v).clone()
    };
    let base = embed(&g.grouped_points);
    assert_eq!(base.shape(), &[8, 16]);
    let k = cfg.group_size;
    let mut shuffled = g.grouped_points.clone();
    for grp in 0..8 {
        for i in 0..k {
            let src = (grp * k + (i * 3 + grp) % k) * 3;
            let dst = (grp * k + i) * 3;
            shuffled.data_mut()[dst..dst + 3].copy_from_slice(&g.grouped_points.data()[src..src + 3]);
        }
    }
    assert!(embed(&shuffled).max_abs_diff(&base) <= 1e-10);

    let twice = Tensor::new(&[2, k, 3], g.grouped_points.data()[..k * 3].repeat(2)).unwrap();
    let out = embed(&twice);
    assert_eq!(out.row(0), out.row(1));
}

fn encode(ps: &ParamStore, cfg: &ModelConfig, g: &crate::pointops::GroupedTokens, sp: &Tensor) -> (Tensor, Tensor) {
    let mut t = Tape::no_grad();
    let out = encoder(&mut t, ps, cfg, g, sp).unwrap();
    (t.value(out.tokens).clone(), t.value(out.states).clone())
}

#[test]
fn encoder_residual_identity_and_empty_stack() {
    let cfg = ModelConfig::tiny();
    let (_, g, sp) = tiny_cloud_groups(&cfg, 2);
    let ps = init_model(&cfg);
    let zeroed = zero_where(&ps, |p| p.starts_with("encoder.blocks."));
    let (tokens, states) = encode(&zeroed, &cfg, &g, &sp);
    let shallow = ModelConfig { depth: 0, ..cfg.clone() };
    let (t0, s0) = encode(&ps, &shallow, &g, &sp);
    assert_eq!(tokens, t0);
    assert_eq!(states, s0);
    assert_eq!(t0.shape(), &[8, 16]);
    assert_eq!(s0.shape(), &[4, 16]);

    let (a, b) = encode(&ps, &cfg, &g, &sp);
    assert_ne!(a, t0);
    assert_eq!(encode(&ps, &cfg, &g, &sp), (a, b));
}

/// Runs one block with the forward and backward scan weights exchanged.
fn swap_directions(ps: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (p, t) in ps.iter() {
        let q = if p.contains(".ssm_f.") {
            p.replace(".ssm_f.", ".ssm_b.")
        } else if p.contains(".ssm_b.") {
            p.replace(".ssm_b.", ".ssm_f.")
        } else {
            p.clone()
        };
        out.insert(q, t.clone());
    }
    out
}

fn run_block(ps: &ParamStore, fx: &Tensor, fh: &Tensor, centers: &Tensor, sp: &Tensor) -> Result<(Tensor, Tensor)> {
    let geo = BlockGeometry::new(centers, sp, 4, 3)?;
    let mut t = Tape::no_grad();
    let x = t.constant(fx.clone());
    let h = t.constant(fh.clone());
    let (x, h) = structural_block(&mut t, ps, "b", x, h, &geo)?;
    Ok((t.value(x).clone(), t.value(h).clone()))
}

fn block_setup(seed: u64, n: usize) -> (ParamStore, Tensor, Tensor, Tensor, Tensor) {
    let (d, e, m) = (6, 8, 3);
    let mut rng = seeded(seed);
    let mut ps = ParamStore::new();
    init_structural_block(&mut ps, &mut rng, "b", d, e, m);
    let fx = uniform(&mut rng, &[n, d], -1.0, 1.0);
    let fh = uniform(&mut rng, &[m, d], -1.0, 1.0);
    let centers = uniform(&mut rng, &[n, 3], -1.0, 1.0);
    let sp = uniform(&mut rng, &[m, 3], -1.0, 1.0);
    (ps, fx, fh, centers, sp)
}

#[test]
fn block_zero_branch_is_residual() {
    let (ps, fx, fh, c, sp) = block_setup(7, 6);
    let (x, h) = run_block(&zero_where(&ps, |_| true), &fx, &fh, &c, &sp).unwrap();
    assert_eq!(x, fx);
    assert_eq!(h, fh);
    let (x, h) = run_block(&ps, &fx, &fh, &c, &sp).unwrap();
    assert_eq!((x.shape(), h.shape()), (fx.shape(), fh.shape()));
}

#[test]
fn block_reports_non_finite_output() {
    let (ps, mut fx, fh, c, sp) = block_setup(8, 5);
    fx.data_mut()[0] = 1e300;
    let mut bad = ps.clone();
    bad.insert("b.lin_out.bias", Tensor::full(&[6], f64::MAX));
    assert!(matches!(run_block(&bad, &fx, &fh, &c, &sp), Err(Error::Numerical(_))));
}

#[test]
fn gradcheck_structural_block() {
    let (mut ps, fx, fh, c, sp) = block_setup(9, 5);
    ps.insert("fx", fx);
    ps.insert("fh", fh);
    let geo = BlockGeometry::new(&c, &sp, 4, 3).unwrap();
    let wx = uniform(&mut seeded(10), &[5, 6], -1.0, 1.0);
    let f = |t: &mut Tape, ps: &ParamStore| -> Result<Var> {
        let x = t.param(ps, "fx")?;
        let h = t.param(ps, "fh")?;
        let (x, h) = structural_block(t, ps, "b", x, h, &geo)?;
        let w = t.constant(wx.clone());
        let x = t.mul(x, w)?;
        let h = t.square(h);
        let (a, b) = (t.sum(x), t.sum(h));
        t.add(a, b)
    };
    // the interval bias nearly cancels in the budget normalization, so its
    // gradient sits close to the finite-difference noise
    let opts = GradCheckOptions { tol: 1e-5, abs_floor: 1e-4, full_limit: 16, probes: 6, ..Default::default() };
    let report = grad_check(f, &ps, &opts).unwrap();
    assert!(report.passed(), "{:#?}", report.flagged().collect::<Vec<_>>());
}

#[test]
fn decoder_shapes_and_empty_mask() {
    let cfg = ModelConfig::tiny();
    let (_, g, sp) = tiny_cloud_groups(&cfg, 3);
    let ps = init_model(&cfg);
    let visible = [0usize, 4, 6];
    let masked = [1usize, 2, 3, 5, 7];
    let mut t = Tape::no_grad();
    let out = encoder(&mut t, &ps, &cfg, &g.select(&visible), &sp).unwrap();
    let pred = decoder(&mut t, &ps, &cfg, out.tokens, &g.centers, &visible, &masked).unwrap().unwrap();
    assert_eq!(t.shape(pred), &[5, 8, 3]);

    // a tape binds each path once, so the modified store needs its own tape
    let zero_head = zero_where(&ps, |p| p.starts_with("decoder.head"));
    let mut t = Tape::no_grad();
    let out = encoder(&mut t, &zero_head, &cfg, &g.select(&visible), &sp).unwrap();
    let pred = decoder(&mut t, &zero_head, &cfg, out.tokens, &g.centers, &visible, &masked).unwrap().unwrap();
    assert!(t.value(pred).data().iter().all(|&v| v == 0.0));

    let all: Vec<usize> = (0..8).collect();
    let full = encoder(&mut t, &ps, &cfg, &g, &sp).unwrap();
    assert!(decoder(&mut t, &ps, &cfg, full.tokens, &g.centers, &all, &[]).unwrap().is_none());
    assert!(decoder(&mut t, &ps, &cfg, out.tokens, &g.centers, &visible, &[1, 2, 3, 5, 5]).is_err());
}

#[test]
fn default_config_shapes() {
    let cfg = ModelConfig::default();
    let cloud = synth_shape(ShapeKind::Sphere, 1024, 4).unwrap();
    let g = group(&cloud, cfg.groups, cfg.group_size, 0).unwrap();
    let sp = state_positions(&cloud, &cfg).unwrap();
    let mut ps = ParamStore::new();
    init_encoder(&mut ps, &mut seeded(1), &cfg);
    init_decoder(&mut ps, &mut seeded(2), &cfg);
    let mut t = Tape::no_grad();
    let n_mask = cfg.mask_count();
    let masked: Vec<usize> = (0..n_mask).map(|i| i * 64 / n_mask).collect();
    let visible: Vec<usize> = (0..64).filter(|i| !masked.contains(i)).collect();
    assert_eq!((masked.len(), visible.len()), (38, 26));
    let out = encoder(&mut t, &ps, &cfg, &g.select(&visible), &sp).unwrap();
    assert_eq!(t.shape(out.tokens), &[26, 384]);
    assert_eq!(t.shape(out.states), &[16, 384]);
    let pred = decoder(&mut t, &ps, &cfg, out.tokens, &g.centers, &visible, &masked).unwrap().unwrap();
    assert_eq!(t.shape(pred), &[38, 32, 3]);
}

#[test]
fn cls_head_examples() {
    let mut rng = seeded(11);
    let mut ps = ParamStore::new();
    init_cls_head(&mut ps, &mut rng, 5, 3);
    let tokens = uniform(&mut rng, &[6, 5], -1.0, 1.0);
    let logits = |tok: &Tensor| {
        let mut t = Tape::no_grad();
        let v = t.constant(tok.clone());
        let l = cls_head(&mut t, &ps, v).unwrap();
        t.value(l).clone()
    };
    let l = logits(&tokens);
    assert_eq!(l.shape(), &[3]);
    assert!(logits(&tokens.select_rows(&[5, 2, 0, 1, 4, 3])).max_abs_diff(&l) <= 1e-10);

    let mut t = Tape::no_grad();
    let u = t.constant(Tensor::full(&[4], 0.3));
    let ce = cross_entropy(&mut t, u, 2).unwrap();
    assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    assert!(cross_entropy(&mut t, u, 4).is_err());
}

#[test]
fn gradcheck_cls_head_and_cross_entropy() {
    let mut rng = seeded(12);
    let mut ps = ParamStore::new();
    init_cls_head(&mut ps, &mut rng, 3, 4);
    ps.insert("tok", uniform(&mut rng, &[5, 3], -1.0, 1.0));
    let f = |t: &mut Tape, ps: &ParamStore| {
        let x = t.param(ps, "tok")?;
        let l = cls_head(t, ps, x)?;
        cross_entropy(t, l, 1)
    };
    let report = grad_check(f, &ps, &GradCheckOptions { tol: 1e-6, ..Default::default() }).unwrap();
    assert!(report.passed(), "{:#?}", report.flagged().collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn block_reversal_invariant(seed in 0u64..5000, n in 2usize..9) {
        let (ps, fx, fh, c, sp) = block_setup(seed, n);
        let rev: Vec<usize> = (0..n).rev().collect();
        let (x, h) = run_block(&ps, &fx, &fh, &c, &sp).unwrap();
        let (xr, hr) = run_block(&swap_directions(&ps), &fx.select_rows(&rev), &fh, &c.select_rows(&rev), &sp).unwrap();
        prop_assert!(x.select_rows(&rev).max_abs_diff(&xr) <= 1e-9);
        prop_assert!(h.max_abs_diff(&hr) <= 1e-9);
    }

    #[test]
    fn light_conv_translation_invariant_without_absolute_term(seed in 0u64..5000, dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -3.0f64..3.0) {
        let (mut ps, feats, pos) = conv_setup(11, 4, seed);
        // rows 3..6 of the first weight layer read the absolute position
        let w = ps.get_mut("c.phi_w.0.weight").unwrap();
        let h = w.last_dim();
        w.data_mut()[3 * h..].iter_mut().for_each(|v| *v = 0.0);
        let moved = pos.map(|v| v);
        let mut moved = moved;
        for r in 0..11 {
            let row = moved.row_mut(r);
            row[0] += dx;
            row[1] += dy;
            row[2] += dz;
        }
        let y = run_conv(&ps, &feats, &pos, 4);
        let ym = run_conv(&ps, &feats, &moved, 4);
        prop_assert!(y.max_abs_diff(&ym) <= 1e-10);
    }
}
