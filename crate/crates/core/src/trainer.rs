//! Plain minibatch SGD and the checkpoint type it produces.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::tasks::{BatchSampler, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate at the first step to 0 at the last.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr_schedule `{other}`"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain("learning_rate must be finite and > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine if total_steps <= 1 => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = step as f64 / (total_steps - 1) as f64;
                0.5 * self.learning_rate * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceKind {
    Pretrained,
    Finetuned,
    Mergetuned,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    /// Free-text description of how the checkpoint was produced.
    pub lineage: String,
}

impl Provenance {
    pub fn new(kind: ProvenanceKind, lineage: impl Into<String>) -> Self {
        Self {
            kind,
            lineage: lineage.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub provenance: Provenance,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamVector, provenance: Provenance, seed: u64) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Self {
            spec,
            params,
            provenance,
            train_config: None,
            seed,
        })
    }

    pub fn with_train_config(mut self, config: TrainConfig) -> Self {
        self.train_config = Some(config);
        self
    }
}

/// Mean minibatch loss for each epoch.
pub type EpochLosses = Vec<f64>;

/// Drives `epochs × ⌈N / batch_size⌉` SGD steps of `objective`.
///
/// `on_epoch` is called after every epoch with the 1-based epoch index and
/// the current parameters.
pub(crate) fn sgd<F, E>(
    init: ParamVector,
    dataset: &Dataset,
    config: &TrainConfig,
    mut objective: F,
    mut on_epoch: E,
) -> Result<(ParamVector, EpochLosses)>
where
    F: FnMut(&ParamVector, &Batch) -> Result<(f64, ParamVector)>,
    E: FnMut(usize, &ParamVector) -> Result<()>,
{
    config.validate()?;
    let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, config.seed)?;
    let per_epoch = sampler.batches_per_epoch();
    let total = config.epochs * per_epoch;
    let mut w = init;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let batch = sampler.next_batch(dataset)?;
            let (loss, grad) = match objective(&w, &batch) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = config.lr_at(step, total);
            if let Err(e) = w.axpy_assign(-lr, &grad) {
                return match e {
                    Error::NonFinite(_) => Err(Error::Diverged { step, loss }),
                    other => Err(other),
                };
            }
            sum += loss;
            step += 1;
        }
        history.push(sum / per_epoch as f64);
        on_epoch(epoch, &w)?;
    }
    Ok((w, history))
}

/// Trains with plain SGD on the mean cross-entropy.
pub fn train(spec: &ModelSpec, init: ParamVector, dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    train_logged(spec, init, dataset, config, ProvenanceKind::Finetuned, "sgd").map(|(c, _)| c)
}

pub fn train_logged(
    spec: &ModelSpec,
    init: ParamVector,
    dataset: &Dataset,
    config: &TrainConfig,
    kind: ProvenanceKind,
    lineage: &str,
) -> Result<(Checkpoint, EpochLosses)> {
    spec.validate()?;
    spec.check_params(&init)?;
    let (params, history) = sgd(
        init,
        dataset,
        config,
        |w, batch| model::loss_and_grad(spec, w, batch),
        |_, _| Ok(()),
    )?;
    let ckpt = Checkpoint::new(spec.clone(), params, Provenance::new(kind, lineage), config.seed)?
        .with_train_config(config.clone());
    Ok((ckpt, history))
}
