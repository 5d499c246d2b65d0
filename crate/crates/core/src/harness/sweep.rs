//! Grid sweeps over config fields, one full run per cell.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{canonical_key, ExperimentConfig};
use super::persist::sig6;
use super::run::{derive_seed, run_experiment, RunReport};
use crate::error::{Error, Result};

/// The report row a sweep tabulates.
pub const SWEEP_METHOD: &str = "mergetune";

#[derive(Debug, Clone, PartialEq)]
struct Axis {
    /// As the user wrote it; used for the CSV column.
    name: String,
    key: &'static str,
    values: Vec<String>,
}

/// Named value lists whose cross product forms the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    axes: Vec<Axis>,
}

impl SweepGrid {
    /// Axes in column order; the first axis varies slowest.
    pub fn new(axes: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut out: Vec<Axis> = Vec::with_capacity(axes.len());
        for (name, values) in axes {
            let key = canonical_key(&name)?;
            if matches!(key, "master_seed" | "output_dir") {
                return Err(Error::Config(format!("`{name}` cannot be swept")));
            }
            if out.iter().any(|a| a.key == key) {
                return Err(Error::Config(format!("`{name}` appears twice in the grid")));
            }
            if values.is_empty() {
                return Err(Error::Config(format!("`{name}` has no values")));
            }
            out.push(Axis { name, key, values });
        }
        Ok(Self { axes: out })
    }

    /// Parses `key=v1,v2,...` arguments.
    pub fn parse_args<S: AsRef<str>>(args: &[S]) -> Result<Self> {
        let axes = args
            .iter()
            .map(|arg| {
                let arg = arg.as_ref();
                let (name, values) = arg
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("grid axis `{arg}` is not `key=v1,v2,...`")))?;
                let values = values
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(String::from)
                    .collect();
                Ok((name.trim().to_string(), values))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn names(&self) -> Vec<String> {
        self.axes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of every axis for cell `index` (row-major, last axis fastest).
    pub fn cell(&self, index: usize) -> Vec<String> {
        let mut rest = index;
        let mut coords = vec![String::new(); self.axes.len()];
        for (i, axis) in self.axes.iter().enumerate().rev() {
            coords[i] = axis.values[rest % axis.values.len()].clone();
            rest /= axis.values.len();
        }
        coords
    }

    /// Order-independent identity of a cell: `key=value` pairs sorted by
    /// canonical key.
    pub fn cell_key(&self, coords: &[String]) -> String {
        let mut pairs: Vec<String> = self
            .axes
            .iter()
            .zip(coords)
            .map(|(a, v)| format!("{}={v}", a.key))
            .collect();
        pairs.sort();
        pairs.join(",")
    }

    /// The standalone config of cell `index`: overrides applied, master
    /// seed derived from the base seed and the cell key, own output dir.
    pub fn cell_config(&self, base: &ExperimentConfig, index: usize) -> Result<ExperimentConfig> {
        let coords = self.cell(index);
        let mut config = base.clone();
        for (axis, value) in self.axes.iter().zip(&coords) {
            config.set(axis.key, value)?;
        }
        config.master_seed = derive_seed(base.master_seed, &self.cell_key(&coords));
        config.output_dir = base.output_dir.join(format!("cell-{index:03}"));
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coords: Vec<String>,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Grid columns, then `seed,base_acc,novel_acc,hm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.columns.clone();
        header.extend(["seed", "base_acc", "novel_acc", "hm"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut record = r.coords.clone();
            record.extend([r.seed.to_string(), sig6(r.base_acc), sig6(r.novel_acc), sig6(r.hm)]);
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn sweep_row(coords: Vec<String>, report: &RunReport) -> Result<SweepRow> {
    let row = report
        .row(SWEEP_METHOD)
        .ok_or_else(|| Error::Config(format!("run report has no `{SWEEP_METHOD}` row")))?;
    Ok(SweepRow {
        coords,
        seed: report.seed,
        base_acc: row.base_accuracy,
        novel_acc: row.novel_accuracy,
        hm: row.harmonic_mean,
    })
}

/// Runs every cell of `grid` (concurrently) and writes `sweep.csv` to
/// `base.output_dir`. All cell configs are built and validated before the
/// first run starts.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepReport> {
    base.validate()?;
    let configs = (0..grid.len())
        .map(|i| grid.cell_config(base, i))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    let rows = configs
        .par_iter()
        .enumerate()
        .map(|(i, config)| sweep_row(grid.cell(i), &run_experiment(config)?))
        .collect::<Result<Vec<_>>>()?;
    let report = SweepReport {
        columns: grid.names(),
        rows,
    };
    report.save_csv(&base.output_dir.join("sweep.csv"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SweepGrid {
        SweepGrid::parse_args(&["lambda=1,4,6", "beta=0.1,0.5"]).unwrap()
    }

    #[test]
    fn cells_enumerate_the_cross_product() {
        let g = grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g.cell(0), vec!["1", "0.1"]);
        assert_eq!(g.cell(1), vec!["1", "0.5"]);
        assert_eq!(g.cell(5), vec!["6", "0.5"]);
    }

    #[test]
    fn cell_key_is_canonical_and_order_free() {
        let a = grid();
        let b = SweepGrid::parse_args(&["mergetune.beta=0.1,0.5", "mergetune.lambda=1,4,6"]).unwrap();
        assert_eq!(a.cell_key(&a.cell(1)), "mergetune.beta=0.5,mergetune.lambda=1");
        assert_eq!(b.cell_key(&b.cell(3)), a.cell_key(&a.cell(1)));
    }

    #[test]
    fn cell_config_applies_overrides_and_seed() {
        let base = ExperimentConfig::default();
        let c = grid().cell_config(&base, 5).unwrap();
        assert_eq!(c.mergetune.lambda, 6.0);
        assert_eq!(c.mergetune.beta, 0.5);
        assert_eq!(c.master_seed, derive_seed(0, "mergetune.beta=0.5,mergetune.lambda=6"));
        assert!(c.output_dir.ends_with("cell-005"));
    }

    #[test]
    fn invalid_axes_are_config_errors() {
        for args in [vec!["gamma=1"], vec!["lambda"], vec!["lambda=1", "mergetune.lambda=2"], vec!["output_dir=x"]] {
            assert!(matches!(SweepGrid::parse_args(&args), Err(Error::Config(_))), "{args:?}");
        }
        let bad = SweepGrid::parse_args(&["tau=0.5,2"]).unwrap();
        let base = ExperimentConfig {
            output_dir: std::env::temp_dir().join("mergetune-never-created"),
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_sweep(&base, &bad), Err(Error::Config(_))));
        assert!(!base.output_dir.exists());
    }
}
