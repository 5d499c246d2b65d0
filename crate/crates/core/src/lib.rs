//! Weight-space merging and mode-connectivity-guided continued fine-tuning
//! on small synthetic classifiers.
//!
//! Module map:
//! - [`params`]: flat parameter-vector algebra.
//! - [`model`]: MLP / softmax-regression classifiers with exact gradients.
//! - [`tasks`]: seeded pretraining / downstream benchmark pairs.
//! - [`trainer`]: plain SGD and checkpoints.
//! - [`merge`]: linear, TIES and DARE merging.
//! - [`mergetune`]: replay-free continued fine-tuning.
//! - [`landscape`]: path probes, barriers, surrogate diagnostics.
//! - [`harness`]: configs, file formats, metrics, run and sweep drivers.

pub mod error;
pub mod harness;
pub mod landscape;
pub mod merge;
pub mod mergetune;
pub mod model;
pub mod params;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
