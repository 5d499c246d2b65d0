//! Replay-free continued fine-tuning guided by linear mode connectivity.
//!
//! Starting from a blend of the zero-shot weights `w1` and the fine-tuned
//! weights `w2`, SGD minimizes
//!
//! ```text
//! J(w) = L2(w) + λ‖w − w1‖² + β · mean_{α ∈ A} L2(w2 + α(w − w2))
//! A    = {1/n, 2/n, …, (n−1)/n}
//! ```
//!
//! on minibatches of the downstream set only. The quadratic penalty stands
//! in for the pretraining-loss interpolation path (second-order expansion
//! around `w1` with isotropic curvature), so pretraining data is never
//! replayed. All three terms share one minibatch per step, and `w2` stays
//! frozen throughout.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::params::{self, ParamVector};
use crate::tasks::Dataset;
use crate::trainer::{self, Checkpoint, Provenance, ProvenanceKind, TrainConfig};

pub const DEFAULT_LAMBDA: f64 = 8.0;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_N_ALPHA: usize = 5;
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTuneConfig {
    /// Weight of the proximity penalty `‖w − w1‖²`.
    pub lambda: f64,
    /// Weight of the averaged interpolation-path loss.
    pub beta: f64,
    /// Grid resolution; the grid has `n_alpha − 1` interior points.
    pub n_alpha: usize,
    /// Initialization blend between `w1` (0) and `w2` (1).
    pub tau: f64,
    pub optimizer: TrainConfig,
}

impl MergeTuneConfig {
    /// Default weighting (λ = 8, β = 0.5, N_α = 5, τ = 0.3) with the given optimizer.
    pub fn with_optimizer(optimizer: TrainConfig) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            n_alpha: DEFAULT_N_ALPHA,
            tau: DEFAULT_TAU,
            optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain("lambda must be finite and >= 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain("beta must be finite and >= 0".into()));
        }
        if self.n_alpha == 0 {
            return Err(Error::Domain("n_alpha must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Domain("tau must lie in [0, 1]".into()));
        }
        self.optimizer.validate()
    }
}

/// The three objective terms at one point, on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub surrogate: f64,
    pub lmc: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.task += other.task;
        self.surrogate += other.surrogate;
        self.lmc += other.lmc;
        self.total += other.total;
    }

    fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            task: self.task * c,
            surrogate: self.surrogate * c,
            lmc: self.lmc * c,
            total: self.total * c,
        }
    }
}

/// `(1 − τ)·w1 + τ·w2`.
pub fn init_blend(w1: &ParamVector, w2: &ParamVector, tau: f64) -> Result<ParamVector> {
    params::interpolate(w1, w2, tau)
}

/// `{1/n, …, (n−1)/n}`; empty for `n <= 1`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    (1..n).map(|k| k as f64 / n as f64).collect()
}

/// Objective value, its breakdown and the exact gradient.
///
/// The path term differentiates through `w2 + α(w − w2)`, contributing
/// `β/|A| · Σ α ∇L2(w_α)`. With an empty grid the path term is 0.
pub fn mergetune_loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    w1: &ParamVector,
    w2: &ParamVector,
    batch: &Batch,
    config: &MergeTuneConfig,
) -> Result<(LossBreakdown, ParamVector)> {
    w.check_compatible(w1)?;
    w.check_compatible(w2)?;
    let (task, task_grad) = model::loss_and_grad(spec, w, batch)?;
    let mut grad = task_grad.into_values();

    let two_lambda = 2.0 * config.lambda;
    let mut surrogate = 0.0;
    for ((g, &wi), &ai) in grad.iter_mut().zip(w.values()).zip(w1.values()) {
        let d = wi - ai;
        surrogate += d * d;
        *g += two_lambda * d;
    }

    let grid = alpha_grid(config.n_alpha);
    if grid.is_empty() && config.beta > 0.0 {
        log::warn!("n_alpha = {} leaves an empty interpolation grid; path term is 0", config.n_alpha);
    }
    let mut lmc = 0.0;
    if !grid.is_empty() {
        let weight = config.beta / grid.len() as f64;
        for &alpha in &grid {
            let w_interp = params::interpolate(w2, w, alpha)?;
            let (l, g) = model::loss_and_grad(spec, &w_interp, batch)?;
            lmc += l;
            if config.beta != 0.0 {
                let coeff = weight * alpha;
                for (acc, gi) in grad.iter_mut().zip(g.values()) {
                    *acc += coeff * gi;
                }
            }
        }
        lmc /= grid.len() as f64;
    }

    let total = task + config.lambda * surrogate + config.beta * lmc;
    let grad = ParamVector::new(w.layout().clone(), grad)?;
    Ok((
        LossBreakdown {
            task,
            surrogate,
            lmc,
            total,
        },
        grad,
    ))
}

/// Runs continued fine-tuning and returns the merged checkpoint.
pub fn run_mergetune(
    spec: &ModelSpec,
    w1: &Checkpoint,
    w2: &Checkpoint,
    dataset: &Dataset,
    config: &MergeTuneConfig,
) -> Result<Checkpoint> {
    run_mergetune_with(spec, w1, w2, dataset, config, |_, _, _| Ok(())).map(|(c, _)| c)
}

/// Like [`run_mergetune`], also returning per-epoch mean loss breakdowns and
/// calling `on_epoch(epoch, params, breakdown)` after every epoch.
///
/// Only `dataset` (the downstream training set) is read.
pub fn run_mergetune_with<F>(
    spec: &ModelSpec,
    w1: &Checkpoint,
    w2: &Checkpoint,
    dataset: &Dataset,
    config: &MergeTuneConfig,
    mut on_epoch: F,
) -> Result<(Checkpoint, Vec<LossBreakdown>)>
where
    F: FnMut(usize, &ParamVector, &LossBreakdown) -> Result<()>,
{
    config.validate()?;
    if w1.spec != *spec || w2.spec != *spec {
        return Err(Error::Compatibility("endpoint checkpoints do not share the model spec".into()));
    }
    let (zero_shot, finetuned) = (&w1.params, &w2.params);
    let init = init_blend(zero_shot, finetuned, config.tau)?;

    let epoch_acc = RefCell::new((LossBreakdown::default(), 0usize));
    let mut log = Vec::with_capacity(config.optimizer.epochs);
    let (params, _) = trainer::sgd(
        init,
        dataset,
        &config.optimizer,
        |w, batch| {
            let (parts, grad) = mergetune_loss_and_grad(spec, w, zero_shot, finetuned, batch, config)?;
            let mut acc = epoch_acc.borrow_mut();
            acc.0.accumulate(&parts);
            acc.1 += 1;
            Ok((parts.total, grad))
        },
        |epoch, w| {
            let (sum, steps) = epoch_acc.replace((LossBreakdown::default(), 0));
            let mean = sum.scaled(1.0 / steps.max(1) as f64);
            log.push(mean);
            on_epoch(epoch, w, &mean)
        },
    )?;

    let lineage = format!(
        "mergetune(lambda={}, beta={}, n_alpha={}, tau={}) of [{}] and [{}]",
        config.lambda, config.beta, config.n_alpha, config.tau, w1.provenance.lineage, w2.provenance.lineage
    );
    let ckpt = Checkpoint::new(
        spec.clone(),
        params,
        Provenance::new(ProvenanceKind::Mergetuned, lineage),
        config.optimizer.seed,
    )?
    .with_train_config(config.optimizer.clone());
    Ok((ckpt, log))
}
