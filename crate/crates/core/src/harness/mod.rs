//! Experiment harness: configuration, persistence, metrics, and the
//! run / sweep drivers behind the CLI.

pub mod config;
pub mod persist;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use persist::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
pub use run::{derive_seed, prepare, run_experiment, Endpoints, MethodRow, RunReport};
pub use sweep::{run_sweep, SweepGrid, SweepReport};

use crate::error::{Error, Result};

/// `2ab / (a + b)` for non-negative `a`, `b`.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!("harmonic mean needs finite non-negative inputs, got ({a}, {b})")));
    }
    if a + b == 0.0 {
        return Err(Error::Domain("harmonic mean of (0, 0) is undefined".into()));
    }
    Ok(2.0 * a * b / (a + b))
}
