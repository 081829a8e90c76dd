//! Shared-weight Siamese CNN for Kellgren-Lawrence grading of knee
//! radiographs, built on a small dense-tensor kernel with hand-written
//! backward passes.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamMap, Real, Tensor};
