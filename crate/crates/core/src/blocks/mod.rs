//! Network assembly: light convolution, the structural and decoder blocks,
//! the point embedder, encoder, decoder, and classification head.
//!
//! All parameters live in one [`ParamStore`](crate::numerics::ParamStore)
//! under fixed prefixes (`encoder.`, `decoder.`, `cls.`); functions here read
//! them by path while recording onto a [`Tape`](crate::numerics::Tape).

pub mod block;
pub mod config;
pub mod embed;
pub mod light_conv;
pub mod model;

pub use block::{structural_block, BlockGeometry};
pub use config::{Config, ModelConfig, TrainConfig};
pub use light_conv::{light_conv, NeighborPlan};
pub use model::{
    cls_head, cross_entropy, decoder, encoder, init_cls_head, init_model, state_positions, EncoderOutput, CLS, DECODER, ENCODER,
};

#[cfg(test)]
mod tests;
