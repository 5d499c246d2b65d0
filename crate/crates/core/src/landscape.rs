//! Loss-landscape instrumentation: interpolation probes, barriers, and checks
//! of the quadratic proximity surrogate.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate, ModelSpec};
use crate::params::{self, ParamVector};
use crate::tasks::Dataset;
use crate::trainer::Checkpoint;

/// Loss and accuracy sampled along the segment `wA → wB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProbe {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Lineage strings of the two endpoints.
    pub endpoint_ids: (String, String),
    /// What the probe evaluated, e.g. `downstream_train[all]`.
    pub eval_spec: String,
}

impl PathProbe {
    pub fn validate(&self) -> Result<()> {
        let n = self.alphas.len();
        if n < 2 || self.losses.len() != n || self.accuracies.len() != n {
            return Err(Error::Domain("probe columns must have equal length >= 2".into()));
        }
        if self.alphas[0] != 0.0 || self.alphas[n - 1] != 1.0 {
            return Err(Error::Domain("probe alphas must start at 0 and end at 1".into()));
        }
        if self.alphas.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Domain("probe alphas must be strictly increasing".into()));
        }
        Ok(())
    }

    /// CSV with header `alpha,loss,accuracy`, floats at full round-trip precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "loss", "accuracy"])?;
        for i in 0..self.alphas.len() {
            w.write_record([
                self.alphas[i].to_string(),
                self.losses[i].to_string(),
                self.accuracies[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Evenly spaced α values in `[0, 1]`, both endpoints included.
pub fn probe_alphas(n_points: usize) -> Vec<f64> {
    let last = (n_points - 1) as f64;
    (0..n_points).map(|k| k as f64 / last).collect()
}

/// Evaluates `interpolate(wA, wB, α)` at `n_points` evenly spaced α.
pub fn probe_path(
    spec: &ModelSpec,
    w_a: &ParamVector,
    w_b: &ParamVector,
    n_points: usize,
    dataset: &Dataset,
    class_subset: Option<&[usize]>,
) -> Result<PathProbe> {
    if n_points < 2 {
        return Err(Error::Domain("a probe needs at least 2 points".into()));
    }
    w_a.check_compatible(w_b)?;
    let alphas = probe_alphas(n_points);
    let mut losses = Vec::with_capacity(n_points);
    let mut accuracies = Vec::with_capacity(n_points);
    for &alpha in &alphas {
        let w = params::interpolate(w_a, w_b, alpha)?;
        let eval = evaluate(spec, &w, dataset, class_subset)?;
        losses.push(eval.loss);
        accuracies.push(eval.accuracy);
    }
    let subset = match class_subset {
        Some(c) => format!("{c:?}"),
        None => "all".to_string(),
    };
    Ok(PathProbe {
        alphas,
        losses,
        accuracies,
        endpoint_ids: (String::new(), String::new()),
        eval_spec: format!("{} examples, classes {subset}", dataset.len()),
    })
}

/// [`probe_path`] between two checkpoints, recording their lineages.
pub fn probe_checkpoints(
    a: &Checkpoint,
    b: &Checkpoint,
    n_points: usize,
    dataset: &Dataset,
    class_subset: Option<&[usize]>,
    label: &str,
) -> Result<PathProbe> {
    let mut probe = probe_path(&a.spec, &a.params, &b.params, n_points, dataset, class_subset)?;
    probe.endpoint_ids = (a.provenance.lineage.clone(), b.provenance.lineage.clone());
    probe.eval_spec = format!("{label}: {}", probe.eval_spec);
    Ok(probe)
}

/// `max_α loss(α) − max(loss(0), loss(1))`.
pub fn barrier(probe: &PathProbe) -> f64 {
    let peak = probe.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ends = probe.losses[0].max(probe.losses[probe.losses.len() - 1]);
    peak - ends
}

/// Isotropic quadratic bowl `(μ/2)‖v − center‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    mu: f64,
    center: ParamVector,
}

impl QuadraticTask {
    pub fn new(mu: f64, center: ParamVector) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Domain(format!("curvature mu = {mu} must be finite and > 0")));
        }
        Ok(Self { mu, center })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn center(&self) -> &ParamVector {
        &self.center
    }
}

pub fn quadratic_loss(task: &QuadraticTask, v: &ParamVector) -> Result<f64> {
    Ok(0.5 * task.mu * params::distance_sq(v, &task.center)?)
}

/// `μ (v − center)`.
pub fn quadratic_grad(task: &QuadraticTask, v: &ParamVector) -> Result<ParamVector> {
    params::scale(&params::sub(v, &task.center)?, task.mu)
}

/// Largest absolute difference over `alphas` between the exact loss at
/// `center + α(w − center)` and the surrogate `(μα²/2)‖w − center‖²`.
pub fn surrogate_exactness_check(task: &QuadraticTask, w: &ParamVector, alphas: &[f64]) -> Result<f64> {
    let direction = params::sub(w, &task.center)?;
    let dist = params::l2_norm_sq(&direction);
    let mut worst = 0.0f64;
    for &alpha in alphas {
        let point = params::axpy(&task.center, alpha, &direction)?;
        let exact = quadratic_loss(task, &point)?;
        let surrogate = 0.5 * task.mu * alpha * alpha * dist;
        worst = worst.max((exact - surrogate).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateGap {
    pub alpha: f64,
    /// Pretraining loss at `w1 + α(w − w1)`.
    pub exact_loss: f64,
    /// `λ_eff · α² · ‖w − w1‖²`.
    pub surrogate_value: f64,
    /// `exact_loss − surrogate_value`; includes the constant `L1(w1)`.
    pub gap: f64,
}

/// Compares the replayed pretraining loss along `w1 → w` with the quadratic
/// surrogate. Diagnostic only: this reads pretraining data.
pub fn surrogate_gap_report(
    spec: &ModelSpec,
    w1: &Checkpoint,
    w: &ParamVector,
    replay_dataset: &Dataset,
    alphas: &[f64],
    lambda_eff: f64,
) -> Result<Vec<SurrogateGap>> {
    let direction = params::sub(w, &w1.params)?;
    let dist = params::l2_norm_sq(&direction);
    alphas
        .iter()
        .map(|&alpha| {
            let point = params::axpy(&w1.params, alpha, &direction)?;
            let exact_loss = evaluate(spec, &point, replay_dataset, None)?.loss;
            let surrogate_value = lambda_eff * alpha * alpha * dist;
            Ok(SurrogateGap {
                alpha,
                exact_loss,
                surrogate_value,
                gap: exact_loss - surrogate_value,
            })
        })
        .collect()
}
