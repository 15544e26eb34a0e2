//! Data-free model compression at desk scale.
//!
//! The crate trains small residual classifiers, synthesizes calibration and
//! distillation samples from a trained model's batch-norm statistics,
//! simulates low-precision inference with straight-through gradients, and
//! distills quantized students without touching the original data.

pub mod analysis;
pub mod datagen;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
