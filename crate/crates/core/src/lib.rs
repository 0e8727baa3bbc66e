//! Dynamic rank-1 convolutions and the single-branch segmentation stack
//! built on them: a context-emitting tower, the DR1Basis feature pyramid,
//! instance mask heads with factored attention, and a unified panoptic
//! prediction layer — plus a synthetic dataset, a toy training loop with
//! gradient checking, and micro-benchmarks for the factored fast path.

pub mod bench;
pub mod data;
pub mod dr1conv;
pub mod error;
pub mod heads;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
