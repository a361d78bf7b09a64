//! The masked-point-modeling training loop with an EMA teacher.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::objective::{ema_update, make_mask, ssc_loss, total_loss, MaskPlan, TeacherState};
use super::optim::{cosine_lr, grad_norm, AdamW, AdamWConfig};
use crate::blocks::{decoder, encoder, init_model, state_positions, Config, ModelConfig, ENCODER};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{checkpoint, ParamStore, Tape, Tensor, Var};
use crate::pointops::{chamfer_loss, group, GroupedTokens, PointCloud};

/// Smooth-L1 threshold of the consistency loss.
pub const SSC_BETA: f64 = 1.0;

const STREAM_SHUFFLE: u64 = 10;
const STREAM_MASK: u64 = 11;

pub const METRICS_HEADER: &str = "step,l_cd,l_ssc,l_total,grad_norm,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.smb3";

/// A cloud's grouping and state positions, computed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct Sample {
    pub grouped: GroupedTokens,
    pub state_pos: Tensor,
}

impl Sample {
    pub fn new(cloud: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { grouped: group(cloud, cfg.groups, cfg.group_size, 0)?, state_pos: state_positions(cloud, cfg)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_cd: f64,
    pub l_ssc: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.l_cd, self.l_ssc, self.l_total, self.grad_norm, self.lr)
    }
}

/// Loss terms of one cloud, recorded on `tape`.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub l_cd: Var,
    pub l_ssc: Var,
    pub total: Var,
}

/// Teacher states `[M, D]` from the full token set, without gradient.
pub fn teacher_states(teacher: &ParamStore, cfg: &ModelConfig, sample: &Sample) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let out = encoder(&mut tape, teacher, cfg, &sample.grouped, &sample.state_pos)?;
    Ok(tape.value(out.states).clone())
}

/// Student forward for one cloud: visible tokens through the encoder, masked
/// groups through the decoder, plus consistency against `teacher_states`.
pub fn sample_loss(
    tape: &mut Tape,
    student: &ParamStore,
    cfg: &ModelConfig,
    sample: &Sample,
    mask: &MaskPlan,
    teacher_states: &Tensor,
) -> Result<SampleLoss> {
    let visible = sample.grouped.select(&mask.visible_idx);
    let enc = encoder(tape, student, cfg, &visible, &sample.state_pos)?;
    let l_cd = match decoder(tape, student, cfg, enc.tokens, &sample.grouped.centers, &mask.visible_idx, &mask.masked_idx)? {
        Some(pred) => {
            let target = sample.grouped.grouped_points.select_rows(&mask.masked_idx);
            chamfer_loss(tape, pred, &target)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let l_ssc = ssc_loss(tape, enc.states, teacher_states, SSC_BETA)?;
    let total = total_loss(tape, l_cd, l_ssc, cfg.lambda)?;
    Ok(SampleLoss { l_cd, l_ssc, total })
}

/// Everything needed to continue a run: student, teacher, optimizer, and position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: Config,
    /// Encoder and decoder parameters.
    pub student: ParamStore,
    /// EMA copy of the student encoder.
    pub teacher: TeacherState,
    pub opt: AdamW,
    /// Number of completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let student = init_model(&config.model);
        let teacher = TeacherState::new(&student.subset(&format!("{ENCODER}.")), config.model.ema_decay);
        let t = &config.train;
        let cfg = AdamWConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay };
        let opt = AdamW::new(cfg, &student);
        Ok(Self { config, student, teacher, opt, epoch: 0 })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.config.train.batch_size).max(1) as u64
    }

    pub fn lr_at(&self, step: u64, n_samples: usize) -> f64 {
        let spe = self.steps_per_epoch(n_samples);
        let t = &self.config.train;
        cosine_lr(t.lr, step, t.warmup_epochs as u64 * spe, t.epochs as u64 * spe)
    }

    /// The mask for `sample_index` in `epoch`.
    pub fn mask_for(&self, epoch: u64, sample_index: usize) -> Result<MaskPlan> {
        let m = &self.config.model;
        make_mask(m.groups, m.mask_ratio, derive_seed(m.seed, &[STREAM_MASK, epoch, sample_index as u64]))
    }

    /// One optimizer step on the samples at `batch` (indices into `data`).
    pub fn train_step(&mut self, data: &[Sample], batch: &[usize], lr: f64) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Argument("train_step: empty batch".into()));
        }
        let cfg = self.config.model.clone();
        let teacher_sum = self.teacher.params.checksum();

        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let sample = data.get(i).ok_or_else(|| Error::Argument(format!("train_step: sample {i} out of range")))?;
            let target = teacher_states(&self.teacher.params, &cfg, sample)?;
            let mask = self.mask_for(self.epoch, i)?;
            terms.push(sample_loss(&mut tape, &self.student, &cfg, sample, &mask, &target)?);
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = |tape: &mut Tape, pick: fn(&SampleLoss) -> Var| -> Result<Var> {
            let mut acc = pick(&terms[0]);
            for t in &terms[1..] {
                acc = tape.add(acc, pick(t))?;
            }
            Ok(tape.scale(acc, inv))
        };
        let l_cd = mean(&mut tape, |t| t.l_cd)?;
        let l_ssc = mean(&mut tape, |t| t.l_ssc)?;
        let loss = mean(&mut tape, |t| t.total)?;

        let step = self.opt.step;
        let value = |v: Var| tape.value(v).item();
        if !value(loss).is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: loss is {} (l_cd {}, l_ssc {}); {}",
                value(loss),
                value(l_cd),
                value(l_ssc),
                first_non_finite(&self.student, "student parameter")
            )));
        }
        let metrics_pre = (value(l_cd), value(l_ssc), value(loss));
        tape.backward(loss)?;
        let grads = tape.param_grads();
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("step {step}: {}", first_non_finite(&grads, "gradient of"))));
        }
        self.opt.update(&mut self.student, &grads, lr)?;
        if self.teacher.params.checksum() != teacher_sum {
            return Err(Error::Contract(format!("step {step}: teacher parameters changed outside the EMA update")));
        }
        ema_update(&mut self.teacher, &self.student)?;

        let (l_cd, l_ssc, l_total) = metrics_pre;
        Ok(StepMetrics { step, l_cd, l_ssc, l_total, grad_norm: norm, lr })
    }

    /// Runs the next epoch over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(self.config.model.seed, &[STREAM_SHUFFLE, self.epoch])));
        let mut out = Vec::new();
        for batch in order.chunks(self.config.train.batch_size) {
            let lr = self.lr_at(self.opt.step, data.len());
            let m = self.train_step(data, batch, lr)?;
            on_step(&m)?;
            out.push(m);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Flattens the full run state into one store under distinct prefixes.
    pub fn to_store(&self) -> ParamStore {
        let mut ps = self.student.with_prefix("student.");
        ps.extend(self.teacher.params.with_prefix("teacher."));
        ps.extend(self.opt.m.with_prefix("opt.m."));
        ps.extend(self.opt.v.with_prefix("opt.v."));
        // Both counters stay far below 2^53, so f64 holds them exactly.
        ps.insert("meta.step", Tensor::scalar(self.opt.step as f64));
        ps.insert("meta.epoch", Tensor::scalar(self.epoch as f64));
        ps
    }

    /// Rebuilds a trainer from [`Trainer::to_store`] output, checking every
    /// section against the shapes `config` implies.
    pub fn from_store(config: Config, store: &ParamStore) -> Result<Self> {
        let mut t = Self::new(config)?;
        let student = store.strip_prefix("student.");
        check_layout("student", &t.student, &student)?;
        let teacher = store.strip_prefix("teacher.");
        check_layout("teacher", &t.teacher.params, &teacher)?;
        let m = store.strip_prefix("opt.m.");
        let v = store.strip_prefix("opt.v.");
        check_layout("opt.m", &t.opt.m, &m)?;
        check_layout("opt.v", &t.opt.v, &v)?;
        let counter = |name: &str| -> Result<u64> {
            let x = store.get(name).map(Tensor::item).ok_or_else(|| Error::Format(format!("checkpoint: missing {name}")))?;
            if x < 0.0 || x.fract() != 0.0 || x > 9.0e15 {
                return Err(Error::Format(format!("checkpoint: {name} = {x} is not a step count")));
            }
            Ok(x as u64)
        };
        t.opt.step = counter("meta.step")?;
        t.epoch = counter("meta.epoch")?;
        t.student = student;
        t.teacher.params = teacher;
        t.opt.m = m;
        t.opt.v = v;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_store(), path)
    }

    pub fn load(config: Config, path: &Path) -> Result<Self> {
        Self::from_store(config, &checkpoint::load(path)?)
    }
}

/// Encoder parameters from either a full training checkpoint or a bare
/// student/encoder store.
pub fn encoder_params(store: &ParamStore) -> ParamStore {
    let student = store.strip_prefix("student.");
    let src = if student.is_empty() { store } else { &student };
    src.subset(&format!("{ENCODER}."))
}

/// Errors with a path-level diff when `got` does not have exactly the layout of `want`.
pub fn check_layout(what: &str, want: &ParamStore, got: &ParamStore) -> Result<()> {
    let mut diffs = Vec::new();
    for (p, t) in want.iter() {
        match got.get(p) {
            None => diffs.push(format!("missing {p} {:?}", t.shape())),
            Some(g) if g.shape() != t.shape() => diffs.push(format!("{p}: expected {:?}, found {:?}", t.shape(), g.shape())),
            Some(_) => {}
        }
    }
    for (p, g) in got.iter() {
        if !want.contains(p) {
            diffs.push(format!("unexpected {p} {:?}", g.shape()));
        }
    }
    if diffs.is_empty() {
        return Ok(());
    }
    let shown = diffs.len().min(8);
    let more = if diffs.len() > shown { format!(" (+{} more)", diffs.len() - shown) } else { String::new() };
    Err(Error::Argument(format!("{what} parameters do not match the config: {}{more}", diffs[..shown].join("; "))))
}

fn first_non_finite(ps: &ParamStore, what: &str) -> String {
    for (p, t) in ps.iter() {
        if let Some(i) = t.data().iter().position(|x| !x.is_finite()) {
            return format!("{what} '{p}' has {} at flat index {i}", t.data()[i]);
        }
    }
    format!("every {what} is finite")
}

/// Output locations of a pretraining run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join(CHECKPOINT_FILE), metrics: dir.join(METRICS_FILE) }
    }
}

/// Trains until `trainer.config.train.epochs` epochs are complete, appending
/// per-step metrics and checkpointing periodically and at the end. A resumed
/// trainer continues exactly where the checkpoint left off.
pub fn run(trainer: &mut Trainer, data: &[Sample], paths: &RunPaths, mut on_epoch: impl FnMut(u64, &[StepMetrics])) -> Result<()> {
    if trainer.opt.step == 0 || !paths.metrics.exists() {
        std::fs::write(&paths.metrics, format!("{METRICS_HEADER}\n"))?;
    } else {
        truncate_metrics(&paths.metrics, trainer.opt.step)?;
    }
    let mut csv = OpenOptions::new().append(true).open(&paths.metrics)?;
    let every = trainer.config.train.checkpoint_every as u64;
    while trainer.epoch < trainer.config.train.epochs as u64 {
        let metrics = trainer.train_epoch(data, |m| Ok(writeln!(csv, "{}", m.csv_row())?))?;
        csv.flush()?;
        on_epoch(trainer.epoch, &metrics);
        if every > 0 && trainer.epoch.is_multiple_of(every) {
            trainer.save(&paths.checkpoint)?;
        }
    }
    trainer.save(&paths.checkpoint)
}

/// Drops metric rows at or beyond `step`, which a resumed run will rewrite.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}
