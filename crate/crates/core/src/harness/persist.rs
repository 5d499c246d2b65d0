//! On-disk formats: checkpoint and dataset JSON, report CSV.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! save/load is bitwise lossless.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::params::{Layout, ParamVector};
use crate::tasks::Dataset;
use crate::trainer::{Checkpoint, Provenance, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;
pub const DATASET_FORMAT_VERSION: u64 = 1;

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> Value {
    json!({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": ckpt.spec,
        "layout": ckpt.params.layout(),
        "seed": ckpt.seed,
        "provenance": ckpt.provenance,
        "train_config": ckpt.train_config,
        "values": ckpt.params.values(),
    })
}

fn field<'a>(doc: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    doc.get(name).ok_or_else(|| Error::format(name, "missing"))
}

fn typed<T: DeserializeOwned>(doc: &Map<String, Value>, name: &str) -> Result<T> {
    T::deserialize(field(doc, name)?).map_err(|e| Error::format(name, e.to_string()))
}

fn check_version(doc: &Map<String, Value>, expected: u64) -> Result<()> {
    let version = field(doc, "format_version")?
        .as_u64()
        .ok_or_else(|| Error::format("format_version", "not a non-negative integer"))?;
    if version != expected {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {version} (expected {expected})"),
        ));
    }
    Ok(())
}

fn float_array(doc: &Map<String, Value>, name: &str) -> Result<Vec<f64>> {
    let items = field(doc, name)?
        .as_array()
        .ok_or_else(|| Error::format(name, "not an array"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64().ok_or_else(|| Error::format(name, format!("entry {i} is not a number"))))
        .collect()
}

fn object(value: &Value) -> Result<&Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::format("<root>", "document is not a JSON object"))
}

pub fn checkpoint_from_json(value: &Value) -> Result<Checkpoint> {
    let doc = object(value)?;
    check_version(doc, CHECKPOINT_FORMAT_VERSION)?;
    let spec: ModelSpec = typed(doc, "spec")?;
    let layout: Layout = typed(doc, "layout")?;
    let seed: u64 = typed(doc, "seed")?;
    let provenance: Provenance = typed(doc, "provenance")?;
    let train_config: Option<TrainConfig> = match doc.get("train_config") {
        None | Some(Value::Null) => None,
        Some(_) => Some(typed(doc, "train_config")?),
    };
    let values = float_array(doc, "values")?;
    if values.len() != layout.total() {
        return Err(Error::format(
            "values",
            format!("expected {} entries for the layout, found {}", layout.total(), values.len()),
        ));
    }
    spec.validate().map_err(|e| Error::format("spec", e.to_string()))?;
    if layout != spec.layout() {
        return Err(Error::Compatibility("checkpoint layout does not match its model spec".into()));
    }
    let params = ParamVector::new(layout, values).map_err(|e| Error::format("values", e.to_string()))?;
    let mut ckpt = Checkpoint::new(spec, params, provenance, seed)?;
    ckpt.train_config = train_config;
    Ok(ckpt)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("<root>", e.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_json(path, &checkpoint_to_json(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_json(&read_json(path)?)
}

pub fn dataset_to_json(dataset: &Dataset) -> Value {
    let (inputs, labels) = dataset.read();
    json!({
        "format_version": DATASET_FORMAT_VERSION,
        "dim": dataset.dim(),
        "num_classes": dataset.num_classes(),
        "inputs": inputs,
        "labels": labels,
    })
}

pub fn dataset_from_json(value: &Value) -> Result<Dataset> {
    let doc = object(value)?;
    check_version(doc, DATASET_FORMAT_VERSION)?;
    let dim: usize = typed(doc, "dim")?;
    let num_classes: usize = typed(doc, "num_classes")?;
    let inputs = float_array(doc, "inputs")?;
    let labels: Vec<usize> = typed(doc, "labels")?;
    if inputs.len() != dim * labels.len() {
        return Err(Error::format(
            "inputs",
            format!("{} values do not form {} rows of dim {dim}", inputs.len(), labels.len()),
        ));
    }
    Dataset::new(dim, num_classes, inputs, labels).map_err(|e| Error::format("labels", e.to_string()))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_json(path, &dataset_to_json(dataset))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&read_json(path)?)
}

/// `x` with 6 significant digits, in positional notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}
