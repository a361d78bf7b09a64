//! Point-cloud representation learning with a structural selective state-space scan.
//!
//! The encoder threads a small set of *spatial states* (latent states with a
//! 3D position) through a stack of bidirectional scan blocks. State-wise scan
//! parameters are generated from the offsets between each token's center and
//! each state's position, and the per-token sampling intervals are normalized
//! so their total is a learnable budget independent of sequence length.
//!
//! Modules, bottom-up:
//! - [`numerics`]: tensors, the differentiation tape, PRNG, gradient checks, checkpoints
//! - [`pointops`]: sampling, neighbor search, grouping, Chamfer distance, synthetic shapes
//! - [`sscan`]: the structural and standard selective scans
//! - [`blocks`]: light convolution, scan blocks, encoder, decoder, heads
//! - [`pretrain`]: masked point modeling with an EMA teacher and state consistency
//! - [`harness`]: invariant suites and the complexity benchmark shared by the CLI

pub mod blocks;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod pointops;
pub mod pretrain;
pub mod sscan;

pub use error::{Error, Result};
