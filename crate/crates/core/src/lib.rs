//! SR-IEM: session-based recommendation with an importance extraction module.
//!
//! The crate provides the full pipeline: click-log ingestion and session
//! preprocessing, a tape-differentiated attention model with two ablation
//! variants, Adam training with a step-decay schedule, top-N ranking
//! evaluation, and a forward-cost scaling benchmark.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod iem;
pub mod model;
pub mod ndmath;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use ndmath::{Tape, Tensor, TensorId};

#[cfg(test)]
pub(crate) mod testutil;
