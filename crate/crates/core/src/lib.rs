//! Continual learning over a stream of heterogeneous architectures.
//!
//! Each task trains a fresh (possibly different) network, distilling from the
//! frozen model of the previous task on the current task's data and, when
//! enabled, on synthetic prior-task samples obtained by inverting that model
//! starting from the current batch.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod replay;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
