//! Toy labelled datasets and a classification head trained on a frozen encoder.

use rand::seq::SliceRandom;

use super::optim::{AdamW, AdamWConfig};
use super::trainer::Sample;
use crate::blocks::{cls_head, cross_entropy, encoder, init_cls_head, ModelConfig, CLS};
use crate::error::{arg_err, Result};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::pointops::{synth_shape, PointCloud, ShapeKind};

/// `per_kind` clouds of each kind, labelled by position in `kinds`, grouped by kind.
pub fn toy_dataset(kinds: &[ShapeKind], per_kind: usize, points: usize, seed: u64) -> Result<Vec<(PointCloud, usize)>> {
    let mut out = Vec::with_capacity(kinds.len() * per_kind);
    for (label, &kind) in kinds.iter().enumerate() {
        for i in 0..per_kind {
            let cloud = synth_shape(kind, points, derive_seed(seed, &[label as u64, i as u64]))?;
            out.push((cloud, label));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    /// Training-set accuracy after each epoch.
    pub accuracy: Vec<f64>,
    /// Mean training loss of each epoch.
    pub loss: Vec<f64>,
    /// Head parameters under `cls.`.
    pub head: ParamStore,
}

impl FinetuneReport {
    /// First epoch (1-based) that reached full training accuracy.
    pub fn epochs_to_perfect(&self) -> Option<usize> {
        self.accuracy.iter().position(|&a| a >= 1.0).map(|i| i + 1)
    }
}

/// Encoder tokens `[N, D]` for every cloud, with the encoder frozen.
pub fn frozen_tokens(encoder_ps: &ParamStore, cfg: &ModelConfig, clouds: &[PointCloud]) -> Result<Vec<Tensor>> {
    clouds
        .iter()
        .map(|c| {
            let s = Sample::new(c, cfg)?;
            let mut tape = Tape::no_grad();
            let out = encoder(&mut tape, encoder_ps, cfg, &s.grouped, &s.state_pos)?;
            Ok(tape.value(out.tokens).clone())
        })
        .collect()
}

fn predict(head: &ParamStore, tokens: &Tensor) -> Result<usize> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(tokens.clone());
    let logits = cls_head(&mut tape, head, x)?;
    let l = tape.value(logits).data();
    Ok((0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best }))
}

/// Trains only the classification head with cross-entropy on precomputed tokens.
/// Stops early once an epoch ends at full training accuracy.
pub fn finetune_head(tokens: &[Tensor], labels: &[usize], n_cls: usize, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    if tokens.is_empty() || tokens.len() != labels.len() || cfg.batch_size == 0 {
        return Err(arg_err!("finetune: {} token sets for {} labels, batch {}", tokens.len(), labels.len(), cfg.batch_size));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_cls) {
        return Err(arg_err!("finetune: label {l} with {n_cls} classes"));
    }
    let d = tokens[0].last_dim();
    let mut head = ParamStore::new();
    init_cls_head(&mut head, &mut seeded(derive_seed(cfg.seed, &[20])), d, n_cls);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }, &head);

    let mut report = FinetuneReport { accuracy: Vec::new(), loss: Vec::new(), head: ParamStore::new() };
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &[21, epoch as u64])));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut acc = None;
            for &i in batch {
                let x = tape.constant(tokens[i].clone());
                let logits = cls_head(&mut tape, &head, x)?;
                let l = cross_entropy(&mut tape, logits, labels[i])?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            let loss = tape.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
            total += tape.value(loss).item() * batch.len() as f64;
            tape.backward(loss)?;
            opt.update(&mut head, &tape.param_grads(), cfg.lr)?;
        }
        let correct = tokens.iter().zip(labels).map(|(t, &l)| predict(&head, t).map(|p| usize::from(p == l))).sum::<Result<usize>>()?;
        report.loss.push(total / tokens.len() as f64);
        report.accuracy.push(correct as f64 / tokens.len() as f64);
        if correct == tokens.len() {
            break;
        }
    }
    debug_assert!(head.paths().all(|p| p.starts_with(CLS)));
    report.head = head;
    Ok(report)
}
