//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the list in reverse, accumulating gradients into the inputs of
//! each node. Parameters are bound by path from a [`ParamStore`], so the
//! gradients come back keyed by the same paths.

use std::collections::BTreeMap;

use super::linalg::gemm;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grad` is the gradient of the loss with respect to `output`. The
/// returned vector has one entry per input; entries for inputs whose
/// `needs` flag is false may be `None`.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Softplus,
    Silu,
    Square,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanPool { x: Var, group: usize },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records gradients for bound parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: BTreeMap::new(), grad_enabled: true, consumed: false }
    }

    /// A tape for inference: parameters are bound as constants and
    /// `backward` is refused.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the recorded graph so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that takes part in differentiation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated binds of the same path share a node.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = store.get(path).ok_or_else(|| Error::Contract(format!("unknown parameter '{path}'")))?.clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(b) != [n] {
            return Err(dim_err!("add_bias: bias {:?} vs last extent {n}", self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, &bv)| *o += bv);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    /// Affine map along the last axis: `x[..., in] @ w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(dim_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err!("linear: bias {:?} vs out extent {n}", self.shape(b)));
            }
        }
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel().max(1) as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let out = self.value(x).map(|v| match u {
            Unary::Exp => v.exp(),
            Unary::Softplus => softplus(v),
            Unary::Silu => v * sigmoid(v),
            Unary::Square => v * v,
        });
        let needs = self.needs(x);
        self.push(out, Op::Unary(x, u), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Layer normalization along the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(x).is_empty() {
            return Err(dim_err!("layer_norm: empty normalized axis"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer_norm: gamma/beta must have shape [{d}]"));
        }
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    /// Selects leading-axis rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("gather_rows: index {bad} out of {rows} rows"));
        }
        let out = t.select_rows(idx);
        let needs = self.needs(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), needs))
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat_rows: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(dim_err!("concat_rows: trailing shape {:?} vs {:?}", &t.shape()[1..], tail));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatRows(xs.to_vec()), needs))
    }

    /// Concatenates two tensors along the last axis; leading extents must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat_cols: {sa:?} vs {sb:?}"));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatCols(a, b), needs))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if start + len > rows {
            return Err(dim_err!("slice_rows: {start}..{} out of {rows}", start + len));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = t.select_rows(&idx);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, needs))
    }

    /// Max over axis 1 of a `[G, K, C]` tensor, giving `[G, C]`. Ties resolve to the lowest k.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [g, k, c] = rank3(t.shape(), "max_pool")?;
        let mut out = vec![f64::NEG_INFINITY; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for ki in 0..k {
                let base = (gi * k + ki) * c;
                for ci in 0..c {
                    let v = t.data()[base + ci];
                    if v > out[gi * c + ci] {
                        out[gi * c + ci] = v;
                        argmax[gi * c + ci] = base + ci;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[g, c], out)?, Op::MaxPool { x, argmax }, needs))
    }

    /// Mean over axis 1 of a `[G, K, C]` tensor, giving `[G, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [g, k, c] = rank3(t.shape(), "mean_pool")?;
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            for ki in 0..k {
                let base = (gi * k + ki) * c;
                for ci in 0..c {
                    out[gi * c + ci] += t.data()[base + ci];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[g, c], out)?, Op::MeanPool { x, group: k }, needs))
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        if self.consumed {
            return Err(Error::Contract("backward called twice without reset".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads =
            grads.into_iter().zip(&self.nodes).map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape"))).collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.numel() / k.max(1);
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tw.data(), true, &mut gx, 0.0);
                    acc(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), true, g, false, &mut gw, 0.0);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    acc(*b, gb);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Unary(x, u) => {
                let xs = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .zip(out.data())
                    .map(|((g, &v), &y)| {
                        g * match u {
                            Unary::Exp => y,
                            Unary::Softplus => sigmoid(v),
                            Unary::Silu => {
                                let s = sigmoid(v);
                                s * (1.0 + v * (1.0 - s))
                            }
                            Unary::Square => 2.0 * v,
                        }
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_gxh = 0.0;
                    let mut mean_gxh_xh = 0.0;
                    for j in 0..d {
                        let gxh = gr[j] * gam[j];
                        mean_gxh += gxh;
                        mean_gxh_xh += gxh * xh[j];
                        gg[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                    }
                    mean_gxh /= d as f64;
                    mean_gxh_xh /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gr[j] * gam[j] - mean_gxh - xh[j] * mean_gxh_xh);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let inner = tx.numel() / tx.shape()[0].max(1);
                let mut gx = vec![0.0; tx.numel()];
                for (o, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * inner..(src + 1) * inner];
                    dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, v)| *d += v);
                }
                acc(*x, gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    acc(v, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let inner = tx.numel() / tx.shape()[0].max(1);
                let mut gx = vec![0.0; tx.numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                acc(*x, gx);
            }
            Op::MeanPool { x, group } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut gx = vec![0.0; tx.numel()];
                for (flat, v) in gx.iter_mut().enumerate() {
                    let gi = flat / (group * c);
                    let ci = flat % c;
                    *v = g[gi * c + ci] / *group as f64;
                }
                acc(*x, gx);
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let contribs = op.backward(&vals, out, g, &needs);
                for ((&v, c), &need) in inputs.iter().zip(contribs).zip(&needs) {
                    if let (Some(c), true) = (c, need) {
                        debug_assert_eq!(c.len(), self.value(v).numel(), "{} grad size", op.name());
                        acc(v, c);
                    }
                }
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every bound parameter, keyed by path. Unreached parameters get zeros.
    pub fn param_grads(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (path, &v) in &self.params {
            let g = self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            out.insert(path, g);
        }
        out
    }
}

fn rank3(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match shape {
        &[g, k, c] if k > 0 => Ok([g, k, c]),
        _ => Err(dim_err!("{what}: expected [G, K>0, C], got {shape:?}")),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
