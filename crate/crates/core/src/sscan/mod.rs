//! Selective scans.
//!
//! Two engines share one recurrence: the *structural* scan, whose hidden
//! state is a set of `M` spatial states each carrying an `E`-wide feature,
//!
//! ```text
//! h_t[m, e] = a_bar[t, m, e] * h_{t-1}[m, e] + b_bar[t, m, e] * x_t[e]
//! y_t[e]    = sum_m c[t, m] * h_t[m, e]
//! ```
//!
//! started from the state features, and the *standard* scan used by the
//! decoder, which is the same recurrence started from zero with parameters
//! that depend on the token features alone.
//!
//! The functions here work on plain tensors. [`diff`] wraps the same
//! recurrence as a differentiable tape operation, and [`layer`] holds the
//! parameterized scan layers used by the blocks.

pub mod diff;
pub mod layer;
pub mod reference;

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Token index processed at step `s` of a length-`n` scan.
    #[inline]
    pub fn token(self, s: usize, n: usize) -> usize {
        match self {
            Direction::Forward => s,
            Direction::Backward => n - 1 - s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscretizeMode {
    /// `a_bar = exp(delta * a)`, `b_bar = delta * b`. What the model runs.
    Simplified,
    /// Zero-order hold: `b_bar = (exp(delta * a) - 1) / a * b`. Reference only.
    Zoh,
}

/// Latent states with positions: `[M, 3]` positions and `[M, E]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialStates {
    pub positions: Tensor,
    pub features: Tensor,
}

impl SpatialStates {
    pub fn new(positions: Tensor, features: Tensor) -> Result<Self> {
        let m = positions.shape().first().copied().unwrap_or(0);
        if m == 0 || positions.shape() != [m, 3] || features.rank() != 2 || features.shape()[0] != m {
            return Err(dim_err!("spatial states: positions {:?} and features {:?} disagree", positions.shape(), features.shape()));
        }
        positions.validate("state positions")?;
        features.validate("state features")?;
        Ok(Self { positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Discretized per-token, per-state parameters feeding the recurrence.
#[derive(Clone, Debug)]
pub struct ScanParams {
    /// `[N, M, E]`
    pub a_bar: Tensor,
    /// `[N, M, E]`
    pub b_bar: Tensor,
    /// `[N, M]`
    pub c: Tensor,
    /// `[N, E]` sampling intervals after budget normalization, when known.
    pub delta: Option<Tensor>,
    /// `[E]` interval budget, when known.
    pub tau: Option<Tensor>,
}

impl ScanParams {
    /// Discretizes `(a, b, delta)` in simplified mode and attaches `c`.
    pub fn simplified(a: &Tensor, b: &Tensor, c: &Tensor, delta: &Tensor) -> Result<Self> {
        let (a_bar, b_bar) = discretize(a, b, delta, DiscretizeMode::Simplified)?;
        Ok(Self { a_bar, b_bar, c: c.clone(), delta: Some(delta.clone()), tau: None })
    }

    fn dims(&self) -> Result<(usize, usize, usize)> {
        let s = self.a_bar.shape();
        if s.len() != 3 || self.b_bar.shape() != s || self.c.shape() != [s[0], s[1]] {
            return Err(dim_err!("scan params: a_bar {:?}, b_bar {:?}, c {:?}", s, self.b_bar.shape(), self.c.shape()));
        }
        Ok((s[0], s[1], s[2]))
    }
}

/// `offsets[i, m] = centers[i] - state_positions[m]`, shape `[N, M, 3]`.
pub fn offsets(centers: &Tensor, state_positions: &Tensor) -> Result<Tensor> {
    let (n, m) = (centers.rows(), state_positions.rows());
    if centers.shape() != [n, 3] || state_positions.shape() != [m, 3] {
        return Err(dim_err!("offsets: {:?} vs {:?}", centers.shape(), state_positions.shape()));
    }
    let mut out = Vec::with_capacity(n * m * 3);
    for i in 0..n {
        let p = centers.row(i);
        for j in 0..m {
            let q = state_positions.row(j);
            out.extend_from_slice(&[p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        }
    }
    Tensor::new(&[n, m, 3], out)
}

/// Rescales each channel's intervals so they sum to that channel's budget:
/// `delta[i, e] = tau[e] * raw[i, e] / sum_j raw[j, e]`.
pub fn adaptive_delta(raw: &Tensor, tau: &Tensor) -> Result<Tensor> {
    let (n, e) = (raw.rows(), raw.last_dim());
    if raw.shape() != [n, e] || tau.shape() != [e] {
        return Err(dim_err!("adaptive_delta: raw {:?}, tau {:?}", raw.shape(), tau.shape()));
    }
    let sums = column_sums(raw)?;
    let mut out = raw.clone();
    for row in out.data_mut().chunks_mut(e) {
        for ((v, &s), &t) in row.iter_mut().zip(&sums).zip(tau.data()) {
            *v = t * *v / s;
        }
    }
    Ok(out)
}

pub(crate) fn column_sums(raw: &Tensor) -> Result<Vec<f64>> {
    let e = raw.last_dim();
    let mut sums = vec![0.0; e];
    for row in raw.data().chunks(e) {
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    if let Some(ch) = sums.iter().position(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::Contract(format!("adaptive_delta: channel {ch} has interval sum {}", sums[ch])));
    }
    Ok(sums)
}

/// Discretizes `a: [M, E]`, `b: [N, M]` with intervals `delta: [N, E]` into
/// `(a_bar, b_bar)`, both `[N, M, E]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor, mode: DiscretizeMode) -> Result<(Tensor, Tensor)> {
    let (m, e) = (a.rows(), a.last_dim());
    let n = delta.rows();
    if a.shape() != [m, e] || b.shape() != [n, m] || delta.shape() != [n, e] {
        return Err(dim_err!("discretize: a {:?}, b {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()));
    }
    let mut a_bar = Vec::with_capacity(n * m * e);
    let mut b_bar = Vec::with_capacity(n * m * e);
    for i in 0..n {
        let d = delta.row(i);
        for j in 0..m {
            let bij = b.data()[i * m + j];
            let arow = a.row(j);
            for k in 0..e {
                let da = d[k] * arow[k];
                a_bar.push(da.exp());
                b_bar.push(match mode {
                    DiscretizeMode::Simplified => d[k] * bij,
                    DiscretizeMode::Zoh if da.abs() < 1e-8 => d[k] * bij,
                    DiscretizeMode::Zoh => da.exp_m1() / arow[k] * bij,
                });
            }
        }
    }
    Ok((Tensor::new(&[n, m, e], a_bar)?, Tensor::new(&[n, m, e], b_bar)?))
}

/// Runs the recurrence, calling `coef(t, m, e)` for `(a_bar, b_bar)`.
///
/// Returns `y: [N * E]` in token order and the final state `[M * E]`. When
/// `trace` is given it receives every intermediate state in processing order
/// (`[N * M * E]`), which the differentiable wrapper needs for its backward pass.
pub(crate) fn recurrence<F>(
    x: &[f64],
    h0: &[f64],
    c: &[f64],
    (n, m, e): (usize, usize, usize),
    dir: Direction,
    coef: F,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize, usize, usize) -> (f64, f64),
{
    let mut h = h0.to_vec();
    let mut y = vec![0.0; n * e];
    for s in 0..n {
        let t = dir.token(s, n);
        let xt = &x[t * e..(t + 1) * e];
        let yt = &mut y[t * e..(t + 1) * e];
        for j in 0..m {
            let cj = c[t * m + j];
            let hj = &mut h[j * e..(j + 1) * e];
            for k in 0..e {
                let (ab, bb) = coef(t, j, k);
                hj[k] = ab * hj[k] + bb * xt[k];
                yt[k] += cj * hj[k];
            }
        }
        if let Some(k) = yt.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("scan produced non-finite output at token {t}, channel {k}")));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.extend_from_slice(&h);
        }
    }
    Ok((y, h))
}

/// Structural scan over `x_hat: [N, E]` from initial states `h0: [M, E]`.
/// Returns `(y: [N, E], h_final: [M, E])`.
pub fn structural_scan(x_hat: &Tensor, h0: &Tensor, params: &ScanParams, dir: Direction) -> Result<(Tensor, Tensor)> {
    let (n, m, e) = params.dims()?;
    if x_hat.shape() != [n, e] || h0.shape() != [m, e] {
        return Err(dim_err!("structural_scan: x {:?}, h0 {:?} vs params ({n}, {m}, {e})", x_hat.shape(), h0.shape()));
    }
    let (ab, bb) = (params.a_bar.data(), params.b_bar.data());
    let coef = |t: usize, j: usize, k: usize| {
        let i = (t * m + j) * e + k;
        (ab[i], bb[i])
    };
    let (y, h) = recurrence(x_hat.data(), h0.data(), params.c.data(), (n, m, e), dir, coef, None)?;
    Ok((Tensor::new(&[n, e], y)?, Tensor::new(&[m, e], h)?))
}

/// Standard selective scan from a zero state, with `b`, `c: [N, M]` and
/// `delta: [N, E]` derived from the tokens alone.
pub fn standard_scan(x_hat: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let params = ScanParams::simplified(a, b, c, delta)?;
    let h0 = Tensor::zeros(&[a.rows(), a.last_dim()]);
    Ok(structural_scan(x_hat, &h0, &params, Direction::Forward)?.0)
}

/// Multiply-adds for one scan: three per `(t, m, e)` for discretization and
/// the state update, one for the output contraction.
pub fn scan_flops(n: u64, m: u64, e: u64) -> u64 {
    3 * n * m * e + n * m * e
}
