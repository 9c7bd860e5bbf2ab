//! Training-time parameter contribution truncation for OOD detection.
//!
//! The classifier head `f = W^T h + b` is rewritten as column sums of the
//! contribution matrix `C = W ⊙ h 1^T`. Truncating `C` at an adaptive
//! threshold during training spreads the decision over more parameters, and
//! the same truncation at inference feeds MSP or energy scores.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod scoring;
pub mod spcp;
pub mod trainer;

pub use error::{Error, Result};
