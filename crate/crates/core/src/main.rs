use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mergetune::harness::persist::save_dataset;
use mergetune::harness::run::{score, Seeded};
use mergetune::harness::sweep::SweepGrid;
use mergetune::harness::{load_checkpoint, run_experiment, run_sweep, save_checkpoint, ExperimentConfig, RunReport};
use mergetune::landscape::{barrier, probe_checkpoints};
use mergetune::merge::{merge_checkpoints, MergeConfig, MergeMethod};
use mergetune::mergetune::run_mergetune_with;
use mergetune::model::init_params;
use mergetune::tasks::{generate_task_pair, TaskPair};
use mergetune::trainer::{train_logged, Checkpoint, ProvenanceKind};
use mergetune::{Error, Result};

/// Weight-space merging and MergeTune continued fine-tuning on synthetic
/// base/novel benchmarks.
#[derive(Debug, Parser)]
#[command(name = "mergetune", version)]
struct Cli {
    /// Flat `key = value` experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    /// Downstream training set (Task 2).
    Downstream,
    /// Pretraining set (Task 1).
    Pretrain,
    Base,
    Novel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the zero-shot checkpoint on the pretraining set.
    Pretrain,
    /// Fine-tune a checkpoint on the downstream base classes.
    Finetune {
        /// Defaults to `<out>/checkpoints/zero_shot.json`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Training-free merge of a zero-shot and a fine-tuned checkpoint.
    Merge {
        #[arg(long)]
        zero_shot: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        #[arg(long, default_value = "linear")]
        method: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        drop_p: Option<f64>,
    },
    /// Continued fine-tuning with the MergeTune objective.
    Mergetune {
        #[arg(long)]
        zero_shot: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
    },
    /// Loss and accuracy along the segment between two checkpoints.
    Probe {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, value_enum, default_value = "downstream")]
        split: Split,
        #[arg(long)]
        points: Option<usize>,
        /// CSV destination; defaults to `<out>/probes/<from>_to_<to>.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Base / novel / HM accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline: pretrain, finetune, merges, MergeTune, probes, report.
    Run,
    /// Cross-product sweep; one run per cell.
    Sweep {
        /// Axis as `key=v1,v2,...` (repeatable), e.g. `lambda=1,4,8`.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
    },
    /// Re-emit the report of a finished run.
    Report {
        /// Defaults to `<out>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn ckpt_path(config: &ExperimentConfig, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| config.output_dir.join("checkpoints").join(format!("{name}.json")))
}

fn load_for(config: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.spec != config.model_spec() {
        return Err(Error::Compatibility(format!(
            "{} was trained with a different model spec than the config",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn metrics(config: &ExperimentConfig, ckpt: &Checkpoint, pair: &TaskPair) -> Result<Value> {
    let row = score("", &config.model_spec(), &ckpt.params, pair)?;
    Ok(json!({
        "base_acc": row.base_accuracy,
        "novel_acc": row.novel_accuracy,
        "hm": row.harmonic_mean,
        "id_acc": row.id_accuracy,
    }))
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    save_checkpoint(ckpt, path)?;
    Ok(path.display().to_string())
}

fn execute(cli: &Cli) -> Result<Value> {
    let config = load_config(cli)?;
    let seeded = Seeded::new(&config);
    let spec = config.model_spec();
    let out = &config.output_dir;
    let pair = || generate_task_pair(&seeded.task);

    match &cli.command {
        Command::Pretrain => {
            let pair = pair()?;
            let data = out.join("data");
            for (name, ds) in [
                ("pretrain_set", &pair.pretrain_set),
                ("downstream_train", &pair.downstream_train),
                ("eval_base", &pair.eval_base),
                ("eval_novel", &pair.eval_novel),
            ] {
                save_dataset(ds, &data.join(format!("{name}.json")))?;
            }
            let init = init_params(&spec, seeded.init_seed);
            let (ckpt, log) = train_logged(
                &spec,
                init,
                &pair.pretrain_set,
                &seeded.pretrain,
                ProvenanceKind::Pretrained,
                "pretrain",
            )?;
            Ok(json!({
                "command": "pretrain",
                "checkpoint": save(&ckpt_path(&config, &None, "zero_shot"), &ckpt)?,
                "final_loss": log.last(),
                "metrics": metrics(&config, &ckpt, &pair)?,
            }))
        }
        Command::Finetune { init } => {
            let pair = pair()?;
            let start = load_for(&config, &ckpt_path(&config, init, "zero_shot"))?;
            let (ckpt, log) = train_logged(
                &spec,
                start.params,
                &pair.downstream_train,
                &seeded.finetune,
                ProvenanceKind::Finetuned,
                "finetune",
            )?;
            Ok(json!({
                "command": "finetune",
                "checkpoint": save(&ckpt_path(&config, &None, "finetuned"), &ckpt)?,
                "final_loss": log.last(),
                "metrics": metrics(&config, &ckpt, &pair)?,
            }))
        }
        Command::Merge {
            zero_shot,
            finetuned,
            method,
            alpha,
            density,
            drop_p,
        } => {
            let pair = pair()?;
            let w1 = load_for(&config, &ckpt_path(&config, zero_shot, "zero_shot"))?;
            let w2 = load_for(&config, &ckpt_path(&config, finetuned, "finetuned"))?;
            let method: MergeMethod = method.parse()?;
            let template = seeded
                .merges
                .iter()
                .find(|m| m.method == method)
                .cloned()
                .unwrap_or(MergeConfig { method, ..seeded.merges.first().cloned().unwrap_or_default() });
            let merge = MergeConfig {
                alpha: alpha.unwrap_or(template.alpha),
                density: density.unwrap_or(template.density),
                drop_p: drop_p.unwrap_or(template.drop_p),
                ..template
            };
            let merged = merge_checkpoints(&w1, &w2, &merge)?;
            Ok(json!({
                "command": "merge",
                "method": merge.label(),
                "checkpoint": save(&ckpt_path(&config, &None, &format!("merge_{method}")), &merged)?,
                "metrics": metrics(&config, &merged, &pair)?,
            }))
        }
        Command::Mergetune { zero_shot, finetuned } => {
            let pair = pair()?;
            let w1 = load_for(&config, &ckpt_path(&config, zero_shot, "zero_shot"))?;
            let w2 = load_for(&config, &ckpt_path(&config, finetuned, "finetuned"))?;
            let before = pair.pretrain_set.reads();
            let (ours, log) = run_mergetune_with(&spec, &w1, &w2, &pair.downstream_train, &seeded.mergetune, |_, _, _| Ok(()))?;
            let reads = pair.pretrain_set.reads() - before;
            Ok(json!({
                "command": "mergetune",
                "checkpoint": save(&ckpt_path(&config, &None, "mergetune"), &ours)?,
                "final_loss": log.last(),
                "pretrain_reads": reads,
                "metrics": metrics(&config, &ours, &pair)?,
            }))
        }
        Command::Probe {
            from,
            to,
            split,
            points,
            output,
        } => {
            let pair = pair()?;
            let a = load_for(&config, from)?;
            let b = load_for(&config, to)?;
            let (dataset, subset, label) = match split {
                Split::Downstream => (&pair.downstream_train, None, "downstream_train"),
                Split::Pretrain => (&pair.pretrain_set, None, "pretrain_set"),
                Split::Base => (&pair.eval_base, Some(pair.base_classes.as_slice()), "eval_base"),
                Split::Novel => (&pair.eval_novel, Some(pair.novel_classes.as_slice()), "eval_novel"),
            };
            let probe = probe_checkpoints(&a, &b, points.unwrap_or(config.probe_points), dataset, subset, label)?;
            let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let path = output
                .clone()
                .unwrap_or_else(|| out.join("probes").join(format!("{}_to_{}.csv", stem(from), stem(to))));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
            }
            probe.save_csv(&path)?;
            Ok(json!({
                "command": "probe",
                "csv": path.display().to_string(),
                "eval": probe.eval_spec,
                "barrier": barrier(&probe),
            }))
        }
        Command::Eval { checkpoint } => {
            let pair = pair()?;
            let ckpt = load_for(&config, checkpoint)?;
            Ok(json!({
                "command": "eval",
                "checkpoint": checkpoint.display().to_string(),
                "metrics": metrics(&config, &ckpt, &pair)?,
            }))
        }
        Command::Run => {
            let report = run_experiment(&config)?;
            Ok(json!({ "command": "run", "output_dir": out.display().to_string(), "report": report }))
        }
        Command::Sweep { grid } => {
            let grid = SweepGrid::parse_args(grid)?;
            let report = run_sweep(&config, &grid)?;
            Ok(json!({
                "command": "sweep",
                "csv": out.join("sweep.csv").display().to_string(),
                "cells": report.rows.len(),
                "report": report,
            }))
        }
        Command::Report { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| out.clone());
            let report = RunReport::load(&dir)?;
            report.save(&dir)?;
            Ok(json!({ "command": "report", "csv": dir.join("report.csv").display().to_string(), "report": report }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary is serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
