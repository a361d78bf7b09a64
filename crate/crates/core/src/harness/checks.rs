//! Individual property checks. Each returns a [`Check`] carrying the measured
//! quantity so callers can print it alongside the verdict.

use rand::Rng as _;

use super::gradient::{fd_noise, ModelObjective};
use crate::blocks::{encoder, init_model, state_positions, Config, ModelConfig, ENCODER};
use crate::error::Result;
use crate::numerics::rng::{derive_seed, seeded, uniform};
use crate::numerics::{checkpoint, GradCheckOptions, ParamStore, Tape, Tensor};
use crate::pointops::{group, synth_shape, GroupedTokens, ShapeKind};
use crate::pretrain::{Sample, Trainer};
use crate::sscan::reference::oracle_scan;
use crate::sscan::{adaptive_delta, discretize, scan_flops, structural_scan, Direction, DiscretizeMode, ScanParams};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity the verdict is based on.
    pub value: f64,
    pub detail: String,
}

impl Check {
    fn bound(name: &'static str, value: f64, limit: f64, what: &str) -> Self {
        Self { name, passed: value <= limit, value, detail: format!("{what} {value:.3e} (limit {limit:.0e})") }
    }
}

/// Per-channel sums of the normalized intervals equal the budget.
pub fn delta_budget(seed: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for (s, n) in [8usize, 26, 64, 256, 1024].into_iter().enumerate() {
        let mut rng = seeded(derive_seed(seed, &[40, s as u64]));
        let raw = uniform(&mut rng, &[n, 16], 1e-4, 5.0);
        let tau = uniform(&mut rng, &[16], 0.05, 8.0);
        let d = adaptive_delta(&raw, &tau)?;
        for k in 0..16 {
            let sum: f64 = (0..n).map(|i| d.data()[i * 16 + k]).sum();
            worst = worst.max((sum - tau.data()[k]).abs());
        }
    }
    Ok(Check::bound("delta budget", worst, 1e-6, "max |sum - tau|"))
}

/// A random scan instance with `a < 0` and intervals in `[0.01, 0.5]`.
pub fn random_scan(seed: u64, n: usize, m: usize, e: usize) -> Result<(Tensor, Tensor, ScanParams)> {
    let mut rng = seeded(seed);
    let x = uniform(&mut rng, &[n, e], -1.0, 1.0);
    let h0 = uniform(&mut rng, &[m, e], -1.0, 1.0);
    let a = uniform(&mut rng, &[m, e], -2.0, 0.0);
    let b = uniform(&mut rng, &[n, m], -1.0, 1.0);
    let c = uniform(&mut rng, &[n, m], -1.0, 1.0);
    let delta = uniform(&mut rng, &[n, e], 0.01, 0.5);
    Ok((x, h0, ScanParams::simplified(&a, &b, &c, &delta)?))
}

/// The structural scan against the naive oracle on `instances` random sizes.
pub fn scan_oracle(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = seeded(derive_seed(seed, &[41]));
    let mut worst: f64 = 0.0;
    for case in 0..instances as u64 {
        let (n, m, e) = (rng.gen_range(1..=64), rng.gen_range(1..=16), rng.gen_range(1..=32));
        let dir = if case % 2 == 0 { Direction::Forward } else { Direction::Backward };
        let (x, h0, p) = random_scan(derive_seed(seed, &[42, case]), n, m, e)?;
        let (y, h) = structural_scan(&x, &h0, &p, dir)?;
        let (yo, ho) = oracle_scan(&x, &h0, &p, dir);
        worst = worst.max(y.max_abs_diff(&yo)).max(h.max_abs_diff(&ho));
    }
    Ok(Check::bound("scan oracle", worst, 1e-10, &format!("{instances} instances, max abs diff")))
}

/// Relabeling the states permutes the final states and leaves the outputs unchanged.
pub fn state_permutation(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = seeded(derive_seed(seed, &[43]));
    let mut worst: f64 = 0.0;
    for case in 0..instances as u64 {
        let (n, m, e) = (rng.gen_range(1..=32), rng.gen_range(2..=12), rng.gen_range(1..=16));
        let (x, h0, p) = random_scan(derive_seed(seed, &[44, case]), n, m, e)?;
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let remap = |t: &Tensor, width: usize| {
            let mut out = Tensor::zeros(t.shape());
            for i in 0..n {
                for (j, &pj) in perm.iter().enumerate() {
                    let (dst, src) = ((i * m + j) * width, (i * m + pj) * width);
                    out.data_mut()[dst..dst + width].copy_from_slice(&t.data()[src..src + width]);
                }
            }
            out
        };
        let q = ScanParams { a_bar: remap(&p.a_bar, e), b_bar: remap(&p.b_bar, e), c: remap(&p.c, 1), delta: None, tau: None };
        let dir = if case % 2 == 0 { Direction::Forward } else { Direction::Backward };
        let (y, h) = structural_scan(&x, &h0, &p, dir)?;
        let (yp, hp) = structural_scan(&x, &h0.select_rows(&perm), &q, dir)?;
        worst = worst.max(y.max_abs_diff(&yp)).max(h.select_rows(&perm).max_abs_diff(&hp));
    }
    Ok(Check::bound("state permutation", worst, 1e-10, &format!("{instances} instances, max abs diff")))
}

/// Exchanges every block's forward and backward scan parameters.
pub fn swap_directions(ps: &ParamStore) -> ParamStore {
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

fn encode(ps: &ParamStore, cfg: &ModelConfig, g: &GroupedTokens, sp: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::no_grad();
    let out = encoder(&mut t, ps, cfg, g, sp)?;
    Ok((t.value(out.tokens).clone(), t.value(out.states).clone()))
}

/// Swapping the direction weights and reversing the tokens reverses the token
/// outputs and leaves the states unchanged, through the whole encoder.
pub fn reversal(cfg: &ModelConfig, clouds: usize) -> Result<Check> {
    let ps = init_model(cfg).subset(&format!("{ENCODER}."));
    let swapped = swap_directions(&ps);
    let mut worst: f64 = 0.0;
    for i in 0..clouds {
        let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
        let cloud = synth_shape(kind, 128, derive_seed(cfg.seed, &[45, i as u64]))?;
        let g = group(&cloud, cfg.groups, cfg.group_size, 0)?;
        let sp = state_positions(&cloud, cfg)?;
        let rev: Vec<usize> = (0..g.len()).rev().collect();
        let (x, h) = encode(&ps, cfg, &g, &sp)?;
        let (xr, hr) = encode(&swapped, cfg, &g.select(&rev), &sp)?;
        worst = worst.max(x.select_rows(&rev).max_abs_diff(&xr)).max(h.max_abs_diff(&hr));
    }
    Ok(Check::bound("reversal", worst, 1e-9, &format!("{clouds} clouds, max abs diff")))
}

/// `|b_simplified - b_zoh| <= 0.5 |delta a| |delta b|` for `|delta a| <= 0.1`, `a <= 0`.
///
/// The bound is tight as `delta a -> 0`, where the computed difference is
/// dominated by cancellation; a slack of four ulps of `delta b` absorbs it.
pub fn zoh_first_order(seed: u64) -> Result<Check> {
    let mut rng = seeded(derive_seed(seed, &[46]));
    let (n, m, e) = (64, 8, 16);
    let a = uniform(&mut rng, &[m, e], -4.0, 0.0);
    let b = uniform(&mut rng, &[n, m], -3.0, 3.0);
    let delta = uniform(&mut rng, &[n, e], 1e-5, 0.025);
    let (_, s) = discretize(&a, &b, &delta, DiscretizeMode::Simplified)?;
    let (_, z) = discretize(&a, &b, &delta, DiscretizeMode::Zoh)?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            for k in 0..e {
                let da = delta.data()[i * e + k] * a.data()[j * e + k];
                let db = delta.data()[i * e + k] * b.data()[i * m + j];
                let idx = (i * m + j) * e + k;
                let bound = 0.5 * da.abs() * db.abs() + 4.0 * f64::EPSILON * db.abs();
                if bound > 0.0 {
                    worst = worst.max((s.data()[idx] - z.data()[idx]).abs() / bound);
                }
            }
        }
    }
    Ok(Check::bound("zoh first order", worst, 1.0, "max |diff| / bound"))
}

/// Scan FLOPs have a constant per-token increment.
pub fn flops_affine() -> Check {
    let (m, e) = (16, 768);
    let per = scan_flops(1, m, e) - scan_flops(0, m, e);
    let exact = (1..=4096u64).all(|n| scan_flops(n, m, e) - scan_flops(n - 1, m, e) == per);
    Check { name: "flops affine", passed: exact, value: per as f64, detail: format!("per-token cost {per}") }
}

/// With nothing masked and the teacher equal to the student, the consistency loss is exactly zero.
pub fn ssc_null(cfg: &Config) -> Result<Check> {
    let mut cfg = cfg.clone();
    cfg.model.mask_ratio = 0.0;
    let data: Vec<Sample> = (0..2)
        .map(|i| {
            synth_shape(ShapeKind::ALL[i], cfg.train.points, derive_seed(cfg.model.seed, &[47, i as u64]))
                .and_then(|c| Sample::new(&c, &cfg.model))
        })
        .collect::<Result<_>>()?;
    let mut tr = Trainer::new(cfg)?;
    let m = tr.train_step(&data, &[0, 1], 0.0)?;
    Ok(Check { name: "ssc null case", passed: m.l_ssc == 0.0, value: m.l_ssc, detail: format!("l_ssc at step 0 = {:e}", m.l_ssc) })
}

/// Save, load, and re-encode: outputs must match bit for bit.
pub fn checkpoint_roundtrip(cfg: &ModelConfig, dir: &std::path::Path) -> Result<Check> {
    let ps = init_model(cfg);
    let path = dir.join("roundtrip.smb3");
    checkpoint::save(&ps, &path)?;
    let loaded = checkpoint::load(&path)?;
    let cloud = synth_shape(ShapeKind::Cube, 128, derive_seed(cfg.seed, &[48]))?;
    let s = Sample::new(&cloud, cfg)?;
    let (x, h) = encode(&ps, cfg, &s.grouped, &s.state_pos)?;
    let (xl, hl) = encode(&loaded, cfg, &s.grouped, &s.state_pos)?;
    let same = |a: &Tensor, b: &Tensor| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let identical = same(&x, &xl) && same(&h, &hl) && loaded.checksum() == ps.checksum();
    Ok(Check {
        name: "checkpoint roundtrip",
        passed: identical,
        value: x.max_abs_diff(&xl).max(h.max_abs_diff(&hl)),
        detail: format!("{} parameters, outputs bit-identical: {identical}", ps.numel()),
    })
}

/// Probe-based finite-difference check of the full objective. Relative errors
/// use a denominator floor at the finite-difference resolution for `tol`.
pub fn model_gradient(cfg: &ModelConfig, corrupt: Option<String>) -> Result<Check> {
    let obj = ModelObjective::new(cfg, 128)?;
    let h = 1e-5;
    let tol = 1e-4;
    let loss = obj.loss()?;
    let opts = GradCheckOptions { h, tol, full_limit: 128, probes: 4, abs_floor: fd_noise(loss, h) / tol, seed: cfg.seed, corrupt };
    let report = obj.check(&opts)?;
    let flagged: Vec<&str> = report.flagged().map(|p| p.path.as_str()).collect();
    let detail = if flagged.is_empty() {
        format!("{} tensors, max rel err {:.2e}, max abs err {:.2e}", report.params.len(), report.max_rel_err(), report.max_abs_err())
    } else {
        format!("{} of {} tensors over {tol:.0e}: {}", flagged.len(), report.params.len(), flagged.join(", "))
    };
    Ok(Check { name: "model gradient", passed: report.passed(), value: report.max_rel_err(), detail })
}
