//! Multi-task partially-supervised dense prediction.
//!
//! A shared encoder feeds one decoder per task. Every training image carries
//! labels for only a subset of tasks; the unlabelled predictions are
//! supervised indirectly through cross-task consistency in learned joint
//! pairwise task-spaces (see [`xtask`]), crop consistency ([`ssl`]) or one of
//! several baseline relations.

pub mod autograd;
pub mod container;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod network;
pub mod params;
pub mod ssl;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod xtask;

pub use error::{Error, Result};
