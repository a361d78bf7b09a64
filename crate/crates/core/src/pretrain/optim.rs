//! AdamW with linear warmup and cosine decay.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Learning rate at `step` (0-based): linear ramp to `peak` over `warmup`
/// steps, then half-cosine down to zero at `total`.
pub fn cosine_lr(peak: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled weight decay applies to `.weight` matrices only; biases, norms,
/// state matrices, `tau`, and the mask token are exempt.
pub fn decays(path: &str) -> bool {
    path.ends_with(".weight")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |ps: &ParamStore| {
            let mut z = ParamStore::new();
            for (p, t) in ps.iter() {
                z.insert(p.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        Self { cfg, m: zeros(params), v: zeros(params), step: 0 }
    }

    /// One update at learning rate `lr`. Parameters without a gradient entry
    /// keep their moments and values untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (path, g) in grads.iter() {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(path), self.m.get_mut(path), self.v.get_mut(path)) else {
                return Err(Error::Contract(format!("optimizer: no state for gradient path '{path}'")));
            };
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!("optimizer: '{path}' grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let wd = if decays(path) { c.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * pd[i]);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry.
pub fn grad_norm(grads: &ParamStore) -> f64 {
    grads.iter().flat_map(|(_, t)| t.data()).map(|g| g * g).sum::<f64>().sqrt()
}
