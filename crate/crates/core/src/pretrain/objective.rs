//! Masking, the pretraining losses, and the EMA teacher.

use rand::seq::index::sample;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::rng::seeded;
use crate::numerics::{CustomOp, ParamStore, Tape, Tensor, Var};

/// A split of `N` groups into visible and masked, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

/// Masks `round_half_up(ratio * n)` groups chosen uniformly without replacement.
/// At least one group must stay visible.
pub fn make_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(arg_err!("mask ratio {ratio} outside [0, 1)"));
    }
    let count = (ratio * n as f64 + 0.5).floor() as usize;
    if count >= n {
        return Err(arg_err!("mask ratio {ratio} masks all {n} groups"));
    }
    let mut masked = sample(&mut seeded(seed), n, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible_idx = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible_idx, masked_idx: masked, seed })
}

/// Mean smooth-L1 between `student` and a fixed `target`:
/// `0.5 d^2 / beta` where `|d| < beta`, else `|d| - 0.5 beta`.
pub fn ssc_loss(tape: &mut Tape, student: Var, target: &Tensor, beta: f64) -> Result<Var> {
    let s = tape.value(student);
    if s.shape() != target.shape() {
        return Err(dim_err!("ssc_loss: student {:?} vs teacher {:?}", s.shape(), target.shape()));
    }
    if beta.is_nan() || beta <= 0.0 {
        return Err(arg_err!("ssc_loss: beta must be positive, got {beta}"));
    }
    let n = s.numel().max(1) as f64;
    let total: f64 = s
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    let op = SmoothL1 { target: target.clone(), beta };
    Ok(tape.custom(&[student], Tensor::scalar(total / n), Box::new(op)))
}

struct SmoothL1 {
    target: Tensor,
    beta: f64,
}

impl CustomOp for SmoothL1 {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0];
        let scale = grad[0] / s.numel().max(1) as f64;
        let g = s
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| {
                let d = a - b;
                scale * if d.abs() < self.beta { d / self.beta } else { d.signum() }
            })
            .collect();
        vec![Some(g)]
    }
}

/// `l_cd + lambda * l_ssc`.
pub fn total_loss(tape: &mut Tape, l_cd: Var, l_ssc: Var, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(arg_err!("total_loss: lambda must be >= 0, got {lambda}"));
    }
    let weighted = tape.scale(l_ssc, lambda);
    tape.add(l_cd, weighted)
}

/// Teacher parameters, updated only as a moving average of the student.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamStore,
    pub decay: f64,
}

impl TeacherState {
    /// Starts as an exact copy of `student`.
    pub fn new(student: &ParamStore, decay: f64) -> Self {
        Self { params: student.clone(), decay }
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student` for every teacher path.
/// `student` may hold extra paths (e.g. the decoder); the teacher's paths must all exist there.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore) -> Result<()> {
    let decay = teacher.decay;
    for (path, t) in teacher.params.iter_mut() {
        let s = student.get(path).ok_or_else(|| Error::Contract(format!("ema_update: student has no parameter '{path}'")))?;
        if s.shape() != t.shape() {
            return Err(Error::Contract(format!(
                "ema_update: '{path}' is {:?} in the teacher and {:?} in the student",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}
