//! Finite-difference check of the complete pretraining objective.

use crate::blocks::{init_model, ModelConfig, ENCODER};
use crate::error::Result;
use crate::numerics::rng::derive_seed;
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::pointops::{synth_shape, ShapeKind};
use crate::pretrain::{make_mask, sample_loss, teacher_states, MaskPlan, Sample};

/// Error floor of a central difference with step `h` on an objective of size
/// `loss`: both evaluations carry a few ulps of rounding, amplified by `1 / h`.
pub fn fd_noise(loss: f64, h: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(f64::MIN_POSITIVE) / h
}

/// A fixed instance of the total pretraining loss as a function of the student parameters.
#[derive(Clone, Debug)]
pub struct ModelObjective {
    pub cfg: ModelConfig,
    pub sample: Sample,
    pub mask: MaskPlan,
    /// Teacher state features, held constant.
    pub target: Tensor,
    pub params: ParamStore,
}

impl ModelObjective {
    /// Fresh student parameters, a torus cloud of `points` points, and
    /// teacher targets from the initial encoder.
    pub fn new(cfg: &ModelConfig, points: usize) -> Result<Self> {
        let cloud = synth_shape(ShapeKind::Torus, points, derive_seed(cfg.seed, &[30]))?;
        let sample = Sample::new(&cloud, cfg)?;
        let mask = make_mask(cfg.groups, cfg.mask_ratio, derive_seed(cfg.seed, &[31]))?;
        let params = init_model(cfg);
        let target = teacher_states(&params.subset(&format!("{ENCODER}.")), cfg, &sample)?;
        Ok(Self { cfg: cfg.clone(), sample, mask, target, params })
    }

    pub fn eval(&self, tape: &mut Tape, ps: &ParamStore) -> Result<Var> {
        Ok(sample_loss(tape, ps, &self.cfg, &self.sample, &self.mask, &self.target)?.total)
    }

    pub fn loss(&self) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = self.eval(&mut tape, &self.params)?;
        Ok(tape.value(v).item())
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        grad_check(|t, ps| self.eval(t, ps), &self.params, opts)
    }
}
