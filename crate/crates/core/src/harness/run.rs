//! End-to-end runs: pretrain → finetune → merges → MergeTune → evaluate → probe.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::harmonic_mean;
use super::persist::{save_checkpoint, sig6};
use crate::error::{Error, Result};
use crate::landscape::{barrier, probe_checkpoints, PathProbe};
use crate::merge::{linear_merge, merge_checkpoints, MergeConfig};
use crate::mergetune::{run_mergetune_with, LossBreakdown, MergeTuneConfig};
use crate::model::{evaluate, init_params, ModelSpec};
use crate::params::ParamVector;
use crate::tasks::{generate_task_pair, TaskPair, TaskParams};
use crate::trainer::{train_logged, Checkpoint, EpochLosses, Provenance, ProvenanceKind, TrainConfig};

/// First 8 bytes (little endian) of `sha256("{master_seed}/{key}")`.
pub fn derive_seed(master_seed: u64, key: &str) -> u64 {
    let digest = Sha256::digest(format!("{master_seed}/{key}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Hex sha256 of the config's canonical text.
pub fn config_hash(config: &ExperimentConfig) -> String {
    Sha256::digest(config.canonical_text().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-stage configs with their derived seeds filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Seeded {
    pub task: TaskParams,
    pub init_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mergetune: MergeTuneConfig,
    pub merges: Vec<MergeConfig>,
}

impl Seeded {
    pub fn new(config: &ExperimentConfig) -> Self {
        let seed = |key: &str| derive_seed(config.master_seed, key);
        let mut mergetune = config.mergetune.clone();
        mergetune.optimizer.seed = seed("mergetune");
        let merges = config
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| MergeConfig {
                seed: seed(&format!("merge/{i}")),
                ..m.clone()
            })
            .collect();
        Self {
            task: TaskParams {
                seed: seed("task"),
                ..config.task.clone()
            },
            init_seed: seed("init"),
            pretrain: TrainConfig {
                seed: seed("pretrain"),
                ..config.pretrain.clone()
            },
            finetune: TrainConfig {
                seed: seed("finetune"),
                ..config.finetune.clone()
            },
            mergetune,
            merges,
        }
    }
}

/// The benchmark and the two endpoint checkpoints every method starts from.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub spec: ModelSpec,
    pub pair: TaskPair,
    pub zero_shot: Checkpoint,
    pub finetuned: Checkpoint,
    pub pretrain_log: EpochLosses,
    pub finetune_log: EpochLosses,
}

/// Generates the task pair and trains ŵ1 (pretraining) and ŵ2 (fine-tuning).
/// Errors carry the failing stage name.
pub fn prepare(config: &ExperimentConfig) -> Result<Endpoints> {
    config.validate()?;
    let seeded = Seeded::new(config);
    let spec = config.model_spec();
    let pair = generate_task_pair(&seeded.task).map_err(|e| e.in_stage("generate"))?;
    let (zero_shot, pretrain_log) = train_logged(
        &spec,
        init_params(&spec, seeded.init_seed),
        &pair.pretrain_set,
        &seeded.pretrain,
        ProvenanceKind::Pretrained,
        "pretrain",
    )
    .map_err(|e| e.in_stage("pretrain"))?;
    let (finetuned, finetune_log) = train_logged(
        &spec,
        zero_shot.params.clone(),
        &pair.downstream_train,
        &seeded.finetune,
        ProvenanceKind::Finetuned,
        "finetune",
    )
    .map_err(|e| e.in_stage("finetune"))?;
    Ok(Endpoints {
        spec,
        pair,
        zero_shot,
        finetuned,
        pretrain_log,
        finetune_log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
    /// All-class accuracy on the union of both evaluation sets.
    pub id_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub name: String,
    /// Relative to the run directory.
    pub file: String,
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<MethodRow>,
    pub probes: Vec<ProbeRecord>,
    /// Loss-log CSVs, relative to the run directory.
    pub loss_logs: Vec<String>,
    /// Reads of the pretraining set observed while MergeTune ran.
    pub pretrain_reads_during_mergetune: u64,
}

impl RunReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn probe(&self, name: &str) -> Option<&ProbeRecord> {
        self.probes.iter().find(|p| p.name == name)
    }

    /// `method,base_acc,novel_acc,hm` with 6 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "base_acc", "novel_acc", "hm"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                sig6(r.base_accuracy),
                sig6(r.novel_accuracy),
                sig6(r.harmonic_mean),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join("report.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let json_path = dir.join("report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Base / novel / HM row for one parameter vector.
pub fn score(method: &str, spec: &ModelSpec, w: &ParamVector, pair: &TaskPair) -> Result<MethodRow> {
    let base = evaluate(spec, w, &pair.eval_base, Some(&pair.base_classes))?;
    let novel = evaluate(spec, w, &pair.eval_novel, Some(&pair.novel_classes))?;
    let all_base = evaluate(spec, w, &pair.eval_base, None)?;
    let all_novel = evaluate(spec, w, &pair.eval_novel, None)?;
    let correct = all_base.accuracy * all_base.count as f64 + all_novel.accuracy * all_novel.count as f64;
    Ok(MethodRow {
        method: method.to_string(),
        base_accuracy: base.accuracy,
        novel_accuracy: novel.accuracy,
        // a model wrong on both splits scores 0 rather than aborting the run
        harmonic_mean: harmonic_mean(base.accuracy, novel.accuracy).unwrap_or(0.0),
        id_accuracy: Some(correct / (all_base.count + all_novel.count) as f64),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_epoch_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_breakdown_log(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "task", "surrogate", "lmc", "total"])?;
    for (i, b) in log.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            b.task.to_string(),
            b.surrogate.to_string(),
            b.lmc.to_string(),
            b.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The state of a run in progress; every stage persists its outputs.
struct Run<'a> {
    config: &'a ExperimentConfig,
    dir: PathBuf,
}

impl Run<'_> {
    fn stage<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        f().map_err(|e| self.fail(e.in_stage(name)))
    }

    /// Records a stage error next to the partial outputs.
    fn fail(&self, err: Error) -> Error {
        let stage = match &err {
            Error::Stage { stage, .. } => stage.as_str(),
            _ => "unknown",
        };
        let note = serde_json::json!({ "stage": stage, "error": err.to_string() });
        // best effort: the stage error is what the caller needs
        let _ = std::fs::write(self.dir.join("failure.json"), note.to_string());
        err
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(ckpt, &self.dir.join("checkpoints").join(format!("{name}.json")))
    }

    fn probe(&self, name: &str, probe: &PathProbe) -> Result<ProbeRecord> {
        let file = format!("probes/{name}.csv");
        probe.save_csv(&self.dir.join(&file))?;
        Ok(ProbeRecord {
            name: name.to_string(),
            file,
            barrier: barrier(probe),
        })
    }

    fn execute(&self) -> Result<RunReport> {
        let config = self.config;
        for sub in ["checkpoints", "probes", "logs"] {
            create_dir(&self.dir.join(sub))?;
        }
        std::fs::write(self.dir.join("config.txt"), config.to_text()).map_err(|e| Error::io(&self.dir, e))?;
        let _ = std::fs::remove_file(self.dir.join("failure.json"));

        let seeded = Seeded::new(config);
        let ends = prepare(config).map_err(|e| self.fail(e))?;
        let Endpoints {
            spec,
            pair,
            zero_shot,
            finetuned,
            ..
        } = &ends;
        self.stage("persist", || {
            self.save("zero_shot", zero_shot)?;
            self.save("finetuned", finetuned)?;
            write_epoch_log(&self.dir.join("logs/pretrain.csv"), &ends.pretrain_log)?;
            write_epoch_log(&self.dir.join("logs/finetune.csv"), &ends.finetune_log)
        })?;

        let mut rows = vec![
            self.stage("evaluate", || score("zero_shot", spec, &zero_shot.params, pair))?,
            self.stage("evaluate", || score("finetuned", spec, &finetuned.params, pair))?,
        ];

        for (i, merge) in seeded.merges.iter().enumerate() {
            let label = merge.label();
            let merged = self.stage("merge", || merge_checkpoints(zero_shot, finetuned, merge))?;
            self.stage("merge", || self.save(&format!("merge{i}_{}", merge.method), &merged))?;
            rows.push(self.stage("evaluate", || score(&label, spec, &merged.params, pair))?);
        }

        let reads_before = pair.pretrain_set.reads();
        let (ours, breakdown) = self.stage("mergetune", || {
            run_mergetune_with(
                spec,
                zero_shot,
                finetuned,
                &pair.downstream_train,
                &seeded.mergetune,
                |_, _, _| Ok(()),
            )
        })?;
        let pretrain_reads_during_mergetune = pair.pretrain_set.reads() - reads_before;
        self.stage("mergetune", || {
            self.save("mergetune", &ours)?;
            write_breakdown_log(&self.dir.join("logs/mergetune.csv"), &breakdown)
        })?;
        rows.push(self.stage("evaluate", || score("mergetune", spec, &ours.params, pair))?);

        if let Some(alpha) = config.ensemble_alpha {
            let label = format!("ensemble@{alpha}");
            let ensemble = self.stage("ensemble", || {
                let w = linear_merge(&zero_shot.params, &ours.params, alpha)?;
                let lineage = format!("{label} of [{}] and [{}]", zero_shot.provenance.lineage, ours.provenance.lineage);
                Checkpoint::new(spec.clone(), w, Provenance::new(ProvenanceKind::Merged, lineage), ours.seed)
            })?;
            self.stage("ensemble", || self.save("ensemble", &ensemble))?;
            rows.push(self.stage("evaluate", || score(&label, spec, &ensemble.params, pair))?);
        }

        let n = config.probe_points;
        let task2 = &pair.downstream_train;
        let probes = self.stage("probe", || {
            Ok(vec![
                self.probe(
                    "zero_shot_to_finetuned",
                    &probe_checkpoints(zero_shot, finetuned, n, task2, None, "downstream_train")?,
                )?,
                self.probe(
                    "mergetune_to_zero_shot",
                    &probe_checkpoints(&ours, zero_shot, n, task2, None, "downstream_train")?,
                )?,
                self.probe(
                    "mergetune_to_finetuned",
                    &probe_checkpoints(&ours, finetuned, n, task2, None, "downstream_train")?,
                )?,
                self.probe(
                    "mergetune_to_zero_shot_task1",
                    &probe_checkpoints(&ours, zero_shot, n, &pair.pretrain_set, None, "pretrain_set")?,
                )?,
            ])
        })?;

        let report = RunReport {
            seed: config.master_seed,
            config_hash: config_hash(config),
            rows,
            probes,
            loss_logs: ["logs/pretrain.csv", "logs/finetune.csv", "logs/mergetune.csv"]
                .map(String::from)
                .to_vec(),
            pretrain_reads_during_mergetune,
        };
        self.stage("report", || report.save(&self.dir))?;
        Ok(report)
    }
}

/// Runs the full pipeline and writes every artifact under `config.output_dir`.
///
/// A failing stage aborts with [`Error::Stage`]; whatever was produced
/// before it stays on disk, alongside a `failure.json` naming the stage.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let run = Run {
        config,
        dir: config.output_dir.clone(),
    };
    create_dir(&run.dir)?;
    run.execute()
}
