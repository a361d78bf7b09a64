//! Lightweight convolution: each element aggregates its k nearest neighbors
//! (by position) with softmax weights computed from the neighbor's relative
//! offset and the element's absolute position.

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{CustomOp, ParamStore, Rng, Tape, Tensor, Var};
use crate::pointops::{knn, tensor_to_points};

/// Hidden width of the neighbor-weight network.
pub const WEIGHT_HIDDEN: usize = 16;

/// Neighbor indices and geometric inputs for one set of positions. Depends only
/// on the positions, so a forward pass builds it once and every block reuses it.
#[derive(Clone, Debug)]
pub struct NeighborPlan {
    pub k: usize,
    /// `[Q * k]`, nearest first; each element is its own first neighbor.
    pub index: Vec<usize>,
    /// `[Q, k, 6]`: `(P_j - P_m, P_m)` per element `m` and neighbor `j`.
    pub geometry: Tensor,
}

impl NeighborPlan {
    pub fn new(positions: &Tensor, k: usize) -> Result<Self> {
        let q = positions.rows();
        if positions.shape() != [q, 3] {
            return Err(dim_err!("light_conv: positions must be [Q, 3], got {:?}", positions.shape()));
        }
        if k == 0 || k > q {
            return Err(arg_err!("light_conv: k = {k} needs 1 <= k <= {q}"));
        }
        let pts = tensor_to_points(positions);
        let index = knn(&pts, &pts, k)?;
        let mut geometry = Vec::with_capacity(q * k * 6);
        for (m, pm) in pts.iter().enumerate() {
            for &j in &index[m * k..(m + 1) * k] {
                let pj = pts[j];
                geometry.extend_from_slice(&[pj[0] - pm[0], pj[1] - pm[1], pj[2] - pm[2], pm[0], pm[1], pm[2]]);
            }
        }
        Ok(Self { k, index, geometry: Tensor::new(&[q, k, 6], geometry)? })
    }

    /// Like [`NeighborPlan::new`], but uses `min(k, Q)` neighbors.
    pub fn clamped(positions: &Tensor, k: usize) -> Result<Self> {
        Self::new(positions, k.min(positions.rows()))
    }

    pub fn len(&self) -> usize {
        self.geometry.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn init(ps: &mut ParamStore, rng: &mut Rng, prefix: &str, e: usize) {
    ps.init_linear(rng, &format!("{prefix}.phi_w.0"), 6, WEIGHT_HIDDEN, true);
    // an output bias would shift every logit equally and cancel in the softmax
    ps.init_linear(rng, &format!("{prefix}.phi_w.1"), WEIGHT_HIDDEN, 1, false);
    ps.init_linear(rng, &format!("{prefix}.phi_c"), e, e, true);
}

/// Softmax neighbor weights, `[Q, k]`.
pub fn neighbor_weights(tape: &mut Tape, ps: &ParamStore, prefix: &str, plan: &NeighborPlan) -> Result<Var> {
    let geo = tape.constant(plan.geometry.clone());
    let w0 = tape.param(ps, &format!("{prefix}.phi_w.0.weight"))?;
    let b0 = tape.param(ps, &format!("{prefix}.phi_w.0.bias"))?;
    let w1 = tape.param(ps, &format!("{prefix}.phi_w.1.weight"))?;
    let h = tape.linear(geo, w0, Some(b0))?;
    let h = tape.silu(h);
    let logits = tape.linear(h, w1, None)?;
    let logits = tape.reshape(logits, &[plan.len(), plan.k])?;
    Ok(tape.softmax(logits))
}

/// `silu(phi_c(sum_j w[m, j] * F[j]))` for features `[Q, E]`.
pub fn light_conv(tape: &mut Tape, ps: &ParamStore, prefix: &str, features: Var, plan: &NeighborPlan) -> Result<Var> {
    if tape.value(features).rows() != plan.len() || tape.value(features).rank() != 2 {
        return Err(dim_err!("light_conv: features {:?} vs {} positions", tape.shape(features), plan.len()));
    }
    let w = neighbor_weights(tape, ps, prefix, plan)?;
    let agg = weighted_rows(tape, features, w, &plan.index)?;
    let wc = tape.param(ps, &format!("{prefix}.phi_c.weight"))?;
    let bc = tape.param(ps, &format!("{prefix}.phi_c.bias"))?;
    let out = tape.linear(agg, wc, Some(bc))?;
    Ok(tape.silu(out))
}

/// `out[q] = sum_j w[q, j] * x[index[q * k + j]]` for `x: [R, E]`, `w: [Q, k]`.
pub fn weighted_rows(tape: &mut Tape, x: Var, w: Var, index: &[usize]) -> Result<Var> {
    let (q, k) = (tape.value(w).rows(), tape.value(w).last_dim());
    let (r, e) = (tape.value(x).rows(), tape.value(x).last_dim());
    if tape.shape(w) != [q, k] || tape.shape(x) != [r, e] || index.len() != q * k {
        return Err(dim_err!("weighted_rows: x {:?}, w {:?}, {} indices", tape.shape(x), tape.shape(w), index.len()));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= r) {
        return Err(arg_err!("weighted_rows: index {bad} out of {r} rows"));
    }
    let (xv, wv) = (tape.value(x).data(), tape.value(w).data());
    let mut out = vec![0.0; q * e];
    for (m, row) in out.chunks_mut(e).enumerate() {
        for j in 0..k {
            let src = index[m * k + j];
            let wj = wv[m * k + j];
            row.iter_mut().zip(&xv[src * e..(src + 1) * e]).for_each(|(o, v)| *o += wj * v);
        }
    }
    let out = Tensor::new(&[q, e], out)?;
    Ok(tape.custom(&[x, w], out, Box::new(WeightedRows { index: index.to_vec(), k })))
}

struct WeightedRows {
    index: Vec<usize>,
    k: usize,
}

impl CustomOp for WeightedRows {
    fn name(&self) -> &'static str {
        "weighted_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let e = x.last_dim();
        let k = self.k;
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
        for (m, g) in grad.chunks(e).enumerate() {
            for j in 0..k {
                let src = self.index[m * k + j];
                let xs = &x.data()[src * e..(src + 1) * e];
                if let Some(gx) = gx.as_mut() {
                    let wj = w.data()[m * k + j];
                    gx[src * e..(src + 1) * e].iter_mut().zip(g).for_each(|(a, b)| *a += wj * b);
                }
                if let Some(gw) = gw.as_mut() {
                    gw[m * k + j] = g.iter().zip(xs).map(|(a, b)| a * b).sum();
                }
            }
        }
        vec![gx, gw]
    }
}
