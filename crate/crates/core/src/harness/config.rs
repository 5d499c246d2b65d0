//! Experiment configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! master_seed = 3
//! model.hidden_dims = 16
//! mergetune.lambda = 8
//! merge.methods = linear, ties, dare
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeMethod, DEFAULT_DARE_DROP_P};
use crate::mergetune::MergeTuneConfig;
use crate::model::{Activation, ModelSpec};
use crate::tasks::TaskParams;
use crate::trainer::{LrSchedule, TrainConfig};

/// Everything a run needs. Every seed inside (task, init, samplers, DARE)
/// is derived from `master_seed`, so the `seed` fields of the nested
/// configs are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskParams,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mergetune: MergeTuneConfig,
    /// Training-free baselines, in report order.
    pub merges: Vec<MergeConfig>,
    /// Weight of the MergeTune checkpoint when ensembling it with the
    /// zero-shot model; `None` skips the ensemble row.
    pub ensemble_alpha: Option<f64>,
    pub probe_points: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stage = |learning_rate, epochs, batch_size, lr_schedule| TrainConfig {
            learning_rate,
            epochs,
            batch_size,
            seed: 0,
            lr_schedule,
        };
        Self {
            task: TaskParams::default(),
            hidden_dims: vec![16],
            activation: Activation::Relu,
            pretrain: stage(0.1, 100, 32, LrSchedule::Cosine),
            finetune: stage(1.0, 300, 16, LrSchedule::Constant),
            mergetune: MergeTuneConfig::with_optimizer(stage(0.02, 100, 16, LrSchedule::Constant)),
            merges: vec![
                MergeConfig::linear(0.5),
                MergeConfig::ties(0.2),
                MergeConfig::dare(DEFAULT_DARE_DROP_P, 0),
            ],
            ensemble_alpha: Some(0.5),
            probe_points: 21,
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "master_seed",
    "output_dir",
    "task.dim",
    "task.num_classes",
    "task.base_fraction",
    "task.n_shots",
    "task.shift_scale",
    "task.noise_sigma",
    "task.class_separation",
    "task.sibling_distance",
    "task.pretrain_per_class",
    "task.eval_per_class",
    "model.hidden_dims",
    "model.activation",
    "pretrain.learning_rate",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr_schedule",
    "finetune.learning_rate",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.lr_schedule",
    "mergetune.lambda",
    "mergetune.beta",
    "mergetune.n_alpha",
    "mergetune.tau",
    "mergetune.learning_rate",
    "mergetune.epochs",
    "mergetune.batch_size",
    "mergetune.lr_schedule",
    "merge.methods",
    "merge.linear_alpha",
    "merge.ties_density",
    "merge.dare_drop_p",
    "ensemble.alpha",
    "probe.n_points",
];

/// Short sweep names and the keys they stand for.
const ALIASES: &[(&str, &str)] = &[
    ("lambda", "mergetune.lambda"),
    ("beta", "mergetune.beta"),
    ("tau", "mergetune.tau"),
    ("n_alpha", "mergetune.n_alpha"),
    ("ties_density", "merge.ties_density"),
    ("dare_drop_p", "merge.dare_drop_p"),
    ("linear_alpha", "merge.linear_alpha"),
];

/// Resolves an alias or full key to its canonical key.
pub fn canonical_key(key: &str) -> Result<&'static str> {
    if let Some(&(_, full)) = ALIASES.iter().find(|(alias, _)| *alias == key) {
        return Ok(full);
    }
    KEYS.iter()
        .find(|k| **k == key)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    /// Parses the flat text form on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Sets one field from its text value. Accepts aliases.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key)?;
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match section {
            "" => match field {
                "master_seed" => self.master_seed = parse(key, value)?,
                "output_dir" => self.output_dir = PathBuf::from(value),
                _ => unreachable!("{key}"),
            },
            "task" => {
                let t = &mut self.task;
                match field {
                    "dim" => t.dim = parse(key, value)?,
                    "num_classes" => t.num_classes = parse(key, value)?,
                    "base_fraction" => t.base_fraction = parse(key, value)?,
                    "n_shots" => t.n_shots = parse(key, value)?,
                    "shift_scale" => t.shift_scale = parse(key, value)?,
                    "noise_sigma" => t.noise_sigma = parse(key, value)?,
                    "class_separation" => t.class_separation = parse(key, value)?,
                    "sibling_distance" => t.sibling_distance = parse(key, value)?,
                    "pretrain_per_class" => t.pretrain_per_class = parse(key, value)?,
                    "eval_per_class" => t.eval_per_class = parse(key, value)?,
                    _ => unreachable!("{key}"),
                }
            }
            "model" => match field {
                "hidden_dims" => {
                    self.hidden_dims = list(value).map(|v| parse(key, v)).collect::<Result<_>>()?;
                }
                "activation" => self.activation = value.parse()?,
                _ => unreachable!("{key}"),
            },
            "pretrain" => set_stage(&mut self.pretrain, key, field, value)?,
            "finetune" => set_stage(&mut self.finetune, key, field, value)?,
            "mergetune" => {
                let m = &mut self.mergetune;
                match field {
                    "lambda" => m.lambda = parse(key, value)?,
                    "beta" => m.beta = parse(key, value)?,
                    "n_alpha" => m.n_alpha = parse(key, value)?,
                    "tau" => m.tau = parse(key, value)?,
                    _ => set_stage(&mut m.optimizer, key, field, value)?,
                }
            }
            "merge" => match field {
                "methods" => {
                    let methods: Vec<MergeMethod> = list(value).map(str::parse).collect::<Result<_>>()?;
                    let template = self.merge_template();
                    self.merges = methods
                        .into_iter()
                        .map(|method| MergeConfig { method, ..template.clone() })
                        .collect();
                }
                "linear_alpha" => {
                    let v = parse(key, value)?;
                    self.merges.iter_mut().for_each(|m| m.alpha = v);
                }
                "ties_density" => {
                    let v = parse(key, value)?;
                    self.merges.iter_mut().for_each(|m| m.density = v);
                }
                "dare_drop_p" => {
                    let v = parse(key, value)?;
                    self.merges.iter_mut().for_each(|m| m.drop_p = v);
                }
                _ => unreachable!("{key}"),
            },
            "ensemble" => {
                self.ensemble_alpha = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "probe" => self.probe_points = parse(key, value)?,
            _ => unreachable!("{key}"),
        }
        Ok(())
    }

    /// Shared merge hyperparameters (the baselines all carry the same values).
    fn merge_template(&self) -> MergeConfig {
        self.merges.first().cloned().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |what: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{what}: {e}")));
        wrap("task", self.task.validate())?;
        wrap("model", self.model_spec().validate())?;
        wrap("pretrain", self.pretrain.validate())?;
        wrap("finetune", self.finetune.validate())?;
        wrap("mergetune", self.mergetune.validate())?;
        for m in &self.merges {
            wrap("merge", m.validate())?;
        }
        if let Some(a) = self.ensemble_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config("ensemble.alpha must lie in [0, 1]".into()));
            }
        }
        if self.probe_points < 2 {
            return Err(Error::Config("probe.n_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::mlp(
            self.task.dim,
            self.hidden_dims.clone(),
            self.task.num_classes,
            self.activation,
        )
    }

    /// Text value of a canonical key, as [`set`](Self::set) would accept it.
    pub fn get(&self, key: &str) -> Result<String> {
        let key = canonical_key(key)?;
        let t = &self.task;
        let m = &self.mergetune;
        let merge = self.merge_template();
        let join = |v: Vec<String>| v.join(",");
        Ok(match key {
            "master_seed" => self.master_seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "task.dim" => t.dim.to_string(),
            "task.num_classes" => t.num_classes.to_string(),
            "task.base_fraction" => t.base_fraction.to_string(),
            "task.n_shots" => t.n_shots.to_string(),
            "task.shift_scale" => t.shift_scale.to_string(),
            "task.noise_sigma" => t.noise_sigma.to_string(),
            "task.class_separation" => t.class_separation.to_string(),
            "task.sibling_distance" => t.sibling_distance.to_string(),
            "task.pretrain_per_class" => t.pretrain_per_class.to_string(),
            "task.eval_per_class" => t.eval_per_class.to_string(),
            "model.hidden_dims" => join(self.hidden_dims.iter().map(ToString::to_string).collect()),
            "model.activation" => self.activation.to_string(),
            "mergetune.lambda" => m.lambda.to_string(),
            "mergetune.beta" => m.beta.to_string(),
            "mergetune.n_alpha" => m.n_alpha.to_string(),
            "mergetune.tau" => m.tau.to_string(),
            "merge.methods" => join(self.merges.iter().map(|c| c.method.to_string()).collect()),
            "merge.linear_alpha" => merge.alpha.to_string(),
            "merge.ties_density" => merge.density.to_string(),
            "merge.dare_drop_p" => merge.drop_p.to_string(),
            "ensemble.alpha" => self.ensemble_alpha.map_or("none".to_string(), |a| a.to_string()),
            "probe.n_points" => self.probe_points.to_string(),
            stage_key => {
                let (section, field) = stage_key.split_once('.').expect("dotted key");
                let s = match section {
                    "pretrain" => &self.pretrain,
                    "finetune" => &self.finetune,
                    _ => &self.mergetune.optimizer,
                };
                match field {
                    "learning_rate" => s.learning_rate.to_string(),
                    "epochs" => s.epochs.to_string(),
                    "batch_size" => s.batch_size.to_string(),
                    _ => s.lr_schedule.to_string(),
                }
            }
        })
    }

    /// The flat text form with every key, in canonical order.
    /// `parse_str(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("canonical key")))
            .collect()
    }

    /// Canonical text without `output_dir`; two runs that differ only in
    /// where they write share this.
    pub fn canonical_text(&self) -> String {
        KEYS.iter()
            .filter(|k| **k != "output_dir")
            .map(|k| format!("{k} = {}\n", self.get(k).expect("canonical key")))
            .collect()
    }
}

fn set_stage(stage: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<()> {
    match field {
        "learning_rate" => stage.learning_rate = parse(key, value)?,
        "epochs" => stage.epochs = parse(key, value)?,
        "batch_size" => stage.batch_size = parse(key, value)?,
        "lr_schedule" => stage.lr_schedule = value.parse()?,
        _ => unreachable!("{key}"),
    }
    Ok(())
}
