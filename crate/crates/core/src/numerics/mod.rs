//! Dense tensors, neural primitives, reverse-mode differentiation, and the
//! supporting PRNG, gradient checker, and checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
mod linalg;
pub mod params;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::ParamStore;
pub use rng::Rng;
pub use tape::{sigmoid, silu, softmax_in_place, softplus, CustomOp, Tape, Var};
pub use tensor::Tensor;

/// Layer-normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
