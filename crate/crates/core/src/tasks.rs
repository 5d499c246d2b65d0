//! Synthetic two-task benchmarks.
//!
//! A [`TaskPair`] models a broad pretraining task over all classes and a
//! narrow few-shot downstream task over the base classes, drawn from a
//! shifted copy of the same class clusters. Forgetting shows up as lost
//! accuracy on the held-out novel classes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Labelled examples with row-major inputs.
///
/// Every read of the example data goes through [`Dataset::read`] (or a
/// helper built on it) and bumps a shared access counter. Clones share the
/// counter, so a stage that touches any copy of a dataset is visible.
#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    reads: Arc<AtomicU64>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.num_classes == other.num_classes
            && self.inputs == other.inputs
            && self.labels == other.labels
    }
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dataset dim must be positive".into()));
        }
        if inputs.len() != dim * labels.len() {
            return Err(Error::Domain(format!(
                "{} inputs do not form {} rows of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!("label {bad} >= num_classes {num_classes}")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Dataset::new".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            inputs,
            labels,
            reads: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of data reads so far across all clones.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Borrow inputs and labels, recording one access.
    pub fn read(&self) -> (&[f64], &[usize]) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        (&self.inputs, &self.labels)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let (inputs, labels) = self.read();
        let mut rows = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            rows.extend_from_slice(&inputs[i * self.dim..(i + 1) * self.dim]);
            ys.push(labels[i]);
        }
        Batch::new(rows, self.dim, ys)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        let (inputs, labels) = self.read();
        Batch::new(inputs.to_vec(), self.dim, labels.to_vec())
    }

    /// Copy of the examples whose label is in `classes`, with a fresh counter.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let (inputs, labels) = self.read();
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for (x, &y) in inputs.chunks_exact(self.dim).zip(labels) {
            if classes.contains(&y) {
                rows.extend_from_slice(x);
                ys.push(y);
            }
        }
        Dataset::new(self.dim, self.num_classes, rows, ys)
    }
}

/// Generator parameters for [`generate_task_pair`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub seed: u64,
    pub dim: usize,
    pub num_classes: usize,
    pub base_fraction: f64,
    pub n_shots: usize,
    pub shift_scale: f64,
    pub noise_sigma: f64,
    /// Norm of every group centre.
    pub class_separation: f64,
    /// Distance of each class mean from its group centre.
    pub sibling_distance: f64,
    pub pretrain_per_class: usize,
    pub eval_per_class: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 20,
            num_classes: 10,
            base_fraction: 0.5,
            n_shots: 16,
            shift_scale: 1.0,
            noise_sigma: 0.5,
            class_separation: 9.0,
            sibling_distance: 1.0,
            pretrain_per_class: 50,
            eval_per_class: 200,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Domain(msg.to_string()));
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.num_classes < 4 {
            return fail("num_classes must be at least 4");
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return fail("base_fraction must lie in (0, 1)");
        }
        let n_base = self.n_base();
        if n_base == 0 || n_base >= self.num_classes {
            return fail("base_fraction leaves one split empty");
        }
        if self.n_shots == 0 || self.pretrain_per_class == 0 || self.eval_per_class == 0 {
            return fail("per-class example counts must be positive");
        }
        if !(self.shift_scale >= 0.0 && self.shift_scale.is_finite()) {
            return fail("shift_scale must be finite and >= 0");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and > 0");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return fail("class_separation must be finite and > 0");
        }
        if !(self.sibling_distance > 0.0 && self.sibling_distance.is_finite()) {
            return fail("sibling_distance must be finite and > 0");
        }
        Ok(())
    }

    pub fn n_base(&self) -> usize {
        (self.base_fraction * self.num_classes as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub pretrain_set: Dataset,
    pub downstream_train: Dataset,
    pub eval_base: Dataset,
    pub eval_novel: Dataset,
    /// Sorted.
    pub base_classes: Vec<usize>,
    /// Sorted.
    pub novel_classes: Vec<usize>,
    /// Class means of the pretraining distribution, row-major `[C, dim]`.
    pub pretrain_means: Vec<f64>,
    /// Class means of the downstream distribution, row-major `[C, dim]`.
    pub downstream_means: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_clusters(
    rng: &mut ChaCha8Rng,
    means: &[f64],
    dim: usize,
    num_classes: usize,
    classes: &[usize],
    per_class: usize,
    sigma: f64,
) -> Result<Dataset> {
    let mut inputs = Vec::with_capacity(classes.len() * per_class * dim);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let mean = &means[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            inputs.extend(mean.iter().map(|m| {
                let eps: f64 = StandardNormal.sample(rng);
                m + sigma * eps
            }));
            labels.push(c);
        }
    }
    Dataset::new(dim, num_classes, inputs, labels)
}

/// Deterministic two-task benchmark.
///
/// Base classes are the first `⌈base_fraction·C⌉` entries of a seeded class
/// permutation. Every novel class is paired round-robin with a base class
/// and the pair shares a group centre of norm `class_separation`; each class
/// mean sits `sibling_distance` away from its centre in a random direction.
/// The downstream distribution translates all means by one random vector of
/// norm `shift_scale`. `downstream_train`, `eval_base` and `eval_novel` are
/// drawn from the downstream distribution.
pub fn generate_task_pair(params: &TaskParams) -> Result<TaskPair> {
    params.validate()?;
    let TaskParams {
        seed,
        dim,
        num_classes,
        n_shots,
        shift_scale,
        noise_sigma,
        class_separation,
        sibling_distance,
        pretrain_per_class,
        eval_per_class,
        ..
    } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let n_base = params.n_base();
    let centres: Vec<Vec<f64>> = (0..n_base)
        .map(|_| random_direction(&mut rng, dim).into_iter().map(|x| class_separation * x).collect())
        .collect();
    let mut pretrain_means = vec![0.0; num_classes * dim];
    for (rank, &c) in order.iter().enumerate() {
        let centre = &centres[rank % n_base];
        let offset = random_direction(&mut rng, dim);
        for ((m, z), o) in pretrain_means[c * dim..(c + 1) * dim].iter_mut().zip(centre).zip(offset) {
            *m = z + sibling_distance * o;
        }
    }
    let shift = random_direction(&mut rng, dim);
    let mut downstream_means = pretrain_means.clone();
    for row in downstream_means.chunks_exact_mut(dim) {
        for (m, s) in row.iter_mut().zip(&shift) {
            *m += shift_scale * s;
        }
    }

    let mut base_classes = order[..n_base].to_vec();
    let mut novel_classes = order[n_base..].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();

    let all: Vec<usize> = (0..num_classes).collect();
    let pretrain_set = sample_clusters(
        &mut rng,
        &pretrain_means,
        dim,
        num_classes,
        &all,
        pretrain_per_class,
        noise_sigma,
    )?;
    let downstream_train = sample_clusters(
        &mut rng,
        &downstream_means,
        dim,
        num_classes,
        &base_classes,
        n_shots,
        noise_sigma,
    )?;
    let eval_base = sample_clusters(
        &mut rng,
        &downstream_means,
        dim,
        num_classes,
        &base_classes,
        eval_per_class,
        noise_sigma,
    )?;
    let eval_novel = sample_clusters(
        &mut rng,
        &downstream_means,
        dim,
        num_classes,
        &novel_classes,
        eval_per_class,
        noise_sigma,
    )?;

    Ok(TaskPair {
        pretrain_set,
        downstream_train,
        eval_base,
        eval_novel,
        base_classes,
        novel_classes,
        pretrain_means,
        downstream_means,
    })
}

/// Epoch-based minibatch sampler.
///
/// Each epoch visits a fresh seeded permutation of the dataset in chunks of
/// `batch_size`; the last chunk of an epoch may be shorter.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(dataset_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if batch_size > dataset_len {
            return Err(Error::Domain(format!(
                "batch_size {batch_size} exceeds dataset size {dataset_len}"
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..dataset_len).collect(),
            cursor: dataset_len,
            batch_size,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        if dataset.len() != self.order.len() {
            return Err(Error::Domain(format!(
                "sampler was built for {} examples, dataset has {}",
                self.order.len(),
                dataset.len()
            )));
        }
        let indices = self.next_indices().to_vec();
        dataset.gather(&indices)
    }
}

/// One batch of `batch_size` examples from a fresh sampler seeded with `seed`.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Batch> {
    BatchSampler::new(dataset.len(), batch_size, seed)?.next_batch(dataset)
}
