//! Masked point modeling with an EMA teacher: masking, the reconstruction
//! and state-consistency objectives, AdamW, the training loop with
//! checkpoint/resume, and a frozen-encoder classification probe.

pub mod finetune;
pub mod objective;
pub mod optim;
pub mod trainer;

pub use finetune::{finetune_head, frozen_tokens, toy_dataset, FinetuneConfig, FinetuneReport};
pub use objective::{ema_update, make_mask, ssc_loss, total_loss, MaskPlan, TeacherState};
pub use optim::{cosine_lr, grad_norm, AdamW, AdamWConfig};
pub use trainer::{check_layout, encoder_params, run, sample_loss, teacher_states, RunPaths, Sample, StepMetrics, Trainer, METRICS_HEADER};

#[cfg(test)]
mod tests;
