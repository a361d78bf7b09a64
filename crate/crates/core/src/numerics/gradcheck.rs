//! Central finite-difference check of tape gradients.

use rand::Rng as _;

use super::rng::seeded;
use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Tensors with at most this many entries are checked coordinate by coordinate;
    /// larger ones along random ±1 probe directions.
    pub full_limit: usize,
    pub probes: usize,
    /// Smallest denominator of the relative error. Gradient entries below it
    /// are judged on absolute error `tol * abs_floor`, which keeps entries that
    /// sit under the finite-difference roundoff level from dominating.
    pub abs_floor: f64,
    pub seed: u64,
    /// Negative control: perturb the analytic gradient of this path before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, full_limit: 64, probes: 3, abs_floor: 1e-8, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub numel: usize,
    /// Number of scalar comparisons (coordinates or probe directions).
    pub comparisons: usize,
    /// Worst relative error with the `abs_floor` denominator guard.
    pub max_rel_err: f64,
    /// Worst relative error with no floor.
    pub max_raw_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    /// Objective value at the checked point.
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_raw_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_raw_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, floor)`, zero when `a == b`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Default)]
struct Worst {
    rel: f64,
    raw: f64,
    abs: f64,
}

impl Worst {
    fn push(&mut self, analytic: f64, numeric: f64, floor: f64) {
        self.rel = self.rel.max(rel_err(analytic, numeric, floor));
        self.raw = self.raw.max(rel_err(analytic, numeric, 0.0));
        self.abs = self.abs.max((analytic - numeric).abs());
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    let mut analytic = tape.param_grads();
    if let Some(path) = &opts.corrupt {
        let g = analytic.get_mut(path).ok_or_else(|| Error::Argument(format!("cannot corrupt unknown parameter '{path}'")))?;
        g.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
    }

    let eval = |ps: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = f(&mut t, ps)?;
        Ok(t.value(v).item())
    };
    let base = eval(params)?;
    if base.to_bits() != eval(params)?.to_bits() || base.to_bits() != tape.value(loss).item().to_bits() {
        return Err(Error::Contract("objective is not deterministic".into()));
    }

    let mut rng = seeded(opts.seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let orig = params.get(&path).unwrap().clone();
        let grad = analytic.get(&path).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; orig.numel()]);
        let n = orig.numel();
        let mut worst = Worst::default();
        let mut comparisons = 0;
        if n <= opts.full_limit {
            for (i, &g) in grad.iter().enumerate() {
                let x0 = orig.data()[i];
                work.get_mut(&path).unwrap().data_mut()[i] = x0 + opts.h;
                let fp = eval(&work)?;
                work.get_mut(&path).unwrap().data_mut()[i] = x0 - opts.h;
                let fm = eval(&work)?;
                work.get_mut(&path).unwrap().data_mut()[i] = x0;
                let numeric = (fp - fm) / (2.0 * opts.h);
                worst.push(g, numeric, opts.abs_floor);
                comparisons += 1;
            }
        } else {
            for _ in 0..opts.probes {
                let dir: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                let directional: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                let mut shifted = |sign: f64| -> Result<f64> {
                    let t = work.get_mut(&path).unwrap();
                    for ((w, &o), &d) in t.data_mut().iter_mut().zip(orig.data()).zip(&dir) {
                        *w = o + sign * opts.h * d;
                    }
                    eval(&work)
                };
                let fp = shifted(1.0)?;
                let fm = shifted(-1.0)?;
                *work.get_mut(&path).unwrap() = orig.clone();
                let numeric = (fp - fm) / (2.0 * opts.h);
                worst.push(directional, numeric, opts.abs_floor);
                comparisons += 1;
            }
        }
        report.push(ParamCheck {
            path,
            numel: n,
            comparisons,
            max_rel_err: worst.rel,
            max_raw_rel_err: worst.raw,
            max_abs_err: worst.abs,
            passed: worst.rel <= opts.tol,
        });
    }
    Ok(GradCheckReport { tol: opts.tol, loss: base, params: report })
}
