//! Differentiable versions of the interval normalization and the scan.

use super::{column_sums, recurrence, Direction};
use crate::error::{dim_err, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Tape version of [`super::adaptive_delta`]; differentiable in both `raw` and `tau`.
pub fn adaptive_delta(tape: &mut Tape, raw: Var, tau: Var) -> Result<Var> {
    let out = super::adaptive_delta(tape.value(raw), tape.value(tau))?;
    Ok(tape.custom(&[raw, tau], out, Box::new(AdaptiveDeltaOp)))
}

struct AdaptiveDeltaOp;

impl CustomOp for AdaptiveDeltaOp {
    fn name(&self) -> &'static str {
        "adaptive_delta"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (raw, tau) = (inputs[0], inputs[1].data());
        let e = raw.last_dim();
        let sums = column_sums(raw).expect("validated in forward");
        let mut dot = vec![0.0; e];
        for (g, r) in grad.chunks(e).zip(raw.data().chunks(e)) {
            for k in 0..e {
                dot[k] += g[k] * r[k];
            }
        }
        let mut graw = vec![0.0; raw.numel()];
        for (gr, g) in graw.chunks_mut(e).zip(grad.chunks(e)) {
            for k in 0..e {
                gr[k] = tau[k] / sums[k] * g[k] - tau[k] * dot[k] / (sums[k] * sums[k]);
            }
        }
        let gtau = (0..e).map(|k| dot[k] / sums[k]).collect();
        vec![Some(graw), Some(gtau)]
    }
}

/// Differentiable scan with simplified discretization done inline:
/// `a_bar = exp(delta * a)`, `b_bar = delta * b`.
///
/// Shapes: `x, delta: [N, E]`, `h0, a: [M, E]`, `b, c: [N, M]`.
/// Returns `(y: [N, E], h_final: [M, E])`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(tape: &mut Tape, x: Var, h0: Var, delta: Var, a: Var, b: Var, c: Var, dir: Direction) -> Result<(Var, Var)> {
    let (n, e) = (tape.value(x).rows(), tape.value(x).last_dim());
    let m = tape.value(h0).rows();
    let shapes_ok = tape.shape(x) == [n, e]
        && tape.shape(h0) == [m, e]
        && tape.shape(delta) == [n, e]
        && tape.shape(a) == [m, e]
        && tape.shape(b) == [n, m]
        && tape.shape(c) == [n, m];
    if !shapes_ok {
        return Err(dim_err!(
            "selective_scan: x {:?} h0 {:?} delta {:?} a {:?} b {:?} c {:?}",
            tape.shape(x),
            tape.shape(h0),
            tape.shape(delta),
            tape.shape(a),
            tape.shape(b),
            tape.shape(c)
        ));
    }
    let (dv, av, bv) = (tape.value(delta).data(), tape.value(a).data(), tape.value(b).data());
    let coef = |t: usize, j: usize, k: usize| {
        let d = dv[t * e + k];
        ((d * av[j * e + k]).exp(), d * bv[t * m + j])
    };
    // the backward pass needs every intermediate state; inference does not
    let mut trace = Vec::with_capacity(if tape.grad_enabled() { n * m * e } else { 0 });
    let keep = tape.grad_enabled();
    let (y, h) =
        recurrence(tape.value(x).data(), tape.value(h0).data(), tape.value(c).data(), (n, m, e), dir, coef, keep.then_some(&mut trace))?;
    let mut joint = y;
    joint.extend_from_slice(&h);
    let out = Tensor::new(&[n + m, e], joint)?;
    let op = ScanOp { dir, dims: (n, m, e), trace };
    let both = tape.custom(&[x, h0, delta, a, b, c], out, Box::new(op));
    let y = tape.slice_rows(both, 0, n)?;
    let h = tape.slice_rows(both, n, m)?;
    Ok((y, h))
}

struct ScanOp {
    dir: Direction,
    dims: (usize, usize, usize),
    /// States after each step, in processing order.
    trace: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, m, e) = self.dims;
        let [x, h0, delta, a, b, c] = [0, 1, 2, 3, 4, 5].map(|i| inputs[i].data());
        let gy = &grad[..n * e];
        let mut gh = grad[n * e..].to_vec();
        let mut gx = vec![0.0; n * e];
        let mut gdelta = vec![0.0; n * e];
        let mut ga = vec![0.0; m * e];
        let mut gb = vec![0.0; n * m];
        let mut gc = vec![0.0; n * m];
        let me = m * e;
        for s in (0..n).rev() {
            let t = self.dir.token(s, n);
            let h_t = &self.trace[s * me..(s + 1) * me];
            let h_prev = if s == 0 { h0 } else { &self.trace[(s - 1) * me..s * me] };
            let gyt = &gy[t * e..(t + 1) * e];
            let xt = &x[t * e..(t + 1) * e];
            let dt = &delta[t * e..(t + 1) * e];
            for j in 0..m {
                let cj = c[t * m + j];
                let bj = b[t * m + j];
                let mut gcj = 0.0;
                let mut gbj = 0.0;
                for k in 0..e {
                    let idx = j * e + k;
                    gcj += gyt[k] * h_t[idx];
                    let g = gh[idx] + cj * gyt[k];
                    let ajk = a[idx];
                    let a_bar = (dt[k] * ajk).exp();
                    let g_abar = g * h_prev[idx];
                    let g_bbar = g * xt[k];
                    gx[t * e + k] += g * dt[k] * bj;
                    gdelta[t * e + k] += g_abar * a_bar * ajk + g_bbar * bj;
                    ga[idx] += g_abar * a_bar * dt[k];
                    gbj += g_bbar * dt[k];
                    gh[idx] = g * a_bar;
                }
                gc[t * m + j] = gcj;
                gb[t * m + j] = gbj;
            }
        }
        vec![Some(gx), Some(gh), Some(gdelta), Some(ga), Some(gb), Some(gc)]
    }
}
