//! Small fully-connected classifiers with hand-written backpropagation.
//!
//! Parameters live in a flat [`ParamVector`] whose layout is derived from the
//! [`ModelSpec`]: for each layer `i` a `layer{i}.weight` segment of shape
//! `[out, in]` (row-major) followed by `layer{i}.bias` of shape `[out]`. The
//! last layer produces one logit per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, Segment};
use crate::tasks::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    /// The ReLU subgradient at 0 is 0.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Empty for a linear (softmax regression) classifier.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Tanh,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Domain("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Domain("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_dims.is_empty()
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::new();
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            segments.push(Segment::new(format!("layer{i}.weight"), vec![fan_out, fan_in]));
            segments.push(Segment::new(format!("layer{i}.bias"), vec![fan_out]));
        }
        Layout::new(segments)
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn check_params(&self, w: &ParamVector) -> Result<()> {
        if *w.layout() != self.layout() {
            return Err(Error::Compatibility(format!(
                "parameters {:?} do not match model layout {:?}",
                w.layout(),
                self.layout()
            )));
        }
        Ok(())
    }
}

/// A minibatch of row-major inputs and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Domain("a batch needs at least one example".into()));
        }
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::Domain(format!(
                "batch has {} inputs for {} labels of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Weights drawn from N(0, gain/fan_in) with gain 1 for tanh and 2 for relu;
/// biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = match spec.activation {
        Activation::Tanh => 1.0,
        Activation::Relu => 2.0,
    };
    let mut values = Vec::with_capacity(layout.total());
    for (fan_in, fan_out) in spec.layer_dims() {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::from_parts(layout, values)
}

struct LayerView {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

fn layer_views(spec: &ModelSpec) -> Vec<LayerView> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let view = LayerView {
                fan_in,
                fan_out,
                weight: offset,
                bias: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            view
        })
        .collect()
}

/// Scratch buffers for a single forward/backward pass.
struct Workspace {
    layers: Vec<LayerView>,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (post-activation for hidden layers, raw logits for the last).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let layers = layer_views(spec);
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.fan_out]));
        let widest = layers.iter().map(|l| l.fan_out.max(l.fan_in)).max().unwrap_or(0);
        Self {
            layers,
            acts,
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    fn forward(&mut self, activation: Activation, w: &[f64], x: &[f64]) -> &[f64] {
        self.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[layer.weight + j * layer.fan_in..layer.weight + (j + 1) * layer.fan_in];
                let z = w[layer.bias + j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if l == last { z } else { activation.apply(z) };
            }
        }
        &self.acts[last + 1]
    }

    /// Accumulates `scale * d loss / d w` into `grad` given `dlogits` for the
    /// most recent forward pass.
    fn backward(&mut self, activation: Activation, w: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        self.delta.clear();
        self.delta.extend_from_slice(dlogits);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &self.acts[l];
            for (j, &d) in self.delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[layer.weight + j * layer.fan_in..layer.weight + (j + 1) * layer.fan_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[layer.bias + j] += d;
            }
            if l == 0 {
                break;
            }
            self.delta_prev.clear();
            self.delta_prev.resize(layer.fan_in, 0.0);
            for (j, &d) in self.delta.iter().enumerate() {
                let row = &w[layer.weight + j * layer.fan_in..layer.weight + (j + 1) * layer.fan_in];
                for (dp, wi) in self.delta_prev.iter_mut().zip(row) {
                    *dp += d * wi;
                }
            }
            for (dp, &a) in self.delta_prev.iter_mut().zip(input) {
                *dp *= activation.derivative_from_output(a);
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }
}

/// Log-sum-exp with max shift over the selected logits.
fn log_sum_exp(logits: &[f64], classes: impl Iterator<Item = usize> + Clone) -> f64 {
    let max = classes
        .clone()
        .map(|c| logits[c])
        .fold(f64::NEG_INFINITY, f64::max);
    max + classes.map(|c| (logits[c] - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    spec.check_params(w)?;
    check_batch(spec, batch)?;
    let params = w.values();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(spec);
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut dlogits = vec![0.0; spec.num_classes];
    for (i, &label) in batch.labels().iter().enumerate() {
        let logits = ws.forward(spec.activation, params, batch.row(i));
        let lse = log_sum_exp(logits, 0..spec.num_classes);
        total += lse - logits[label];
        for (c, d) in dlogits.iter_mut().enumerate() {
            *d = (logits[c] - lse).exp() / n;
        }
        dlogits[label] -= 1.0 / n;
        ws.backward(spec.activation, params, &dlogits, &mut grad);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss_and_grad (loss)".into()));
    }
    crate::params::ensure_finite(&grad, "loss_and_grad (gradient)")?;
    Ok((loss, ParamVector::from_parts(w.layout().clone(), grad)))
}

/// Loss only, for probes and diagnostics.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> Result<f64> {
    spec.check_params(w)?;
    check_batch(spec, batch)?;
    let mut ws = Workspace::new(spec);
    let mut total = 0.0;
    for (i, &label) in batch.labels().iter().enumerate() {
        let logits = ws.forward(spec.activation, w.values(), batch.row(i));
        total += log_sum_exp(logits, 0..spec.num_classes) - logits[label];
    }
    Ok(total / batch.len() as f64)
}

/// Per-example logits, row-major `[n, num_classes]`.
pub fn predict_logits(spec: &ModelSpec, w: &ParamVector, inputs: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(w)?;
    if !inputs.len().is_multiple_of(spec.input_dim) {
        return Err(Error::Domain("input length is not a multiple of input_dim".into()));
    }
    let mut ws = Workspace::new(spec);
    let mut out = Vec::with_capacity(inputs.len() / spec.input_dim * spec.num_classes);
    for x in inputs.chunks_exact(spec.input_dim) {
        out.extend_from_slice(ws.forward(spec.activation, w.values(), x));
    }
    Ok(out)
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.dim() != spec.input_dim {
        return Err(Error::Compatibility(format!(
            "batch dim {} != model input_dim {}",
            batch.dim(),
            spec.input_dim
        )));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::Domain(format!("label {bad} >= num_classes {}", spec.num_classes)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Loss and accuracy on `dataset`.
///
/// With `class_subset`, only examples whose label is in the subset are
/// scored and both the softmax and the argmax run over the subset's logits.
/// Argmax ties resolve to the lowest class index.
pub fn evaluate(
    spec: &ModelSpec,
    w: &ParamVector,
    dataset: &Dataset,
    class_subset: Option<&[usize]>,
) -> Result<Evaluation> {
    spec.check_params(w)?;
    if dataset.dim() != spec.input_dim {
        return Err(Error::Compatibility(format!(
            "dataset dim {} != model input_dim {}",
            dataset.dim(),
            spec.input_dim
        )));
    }
    let all: Vec<usize> = (0..spec.num_classes).collect();
    let mut classes: Vec<usize> = class_subset.map_or(all, <[usize]>::to_vec);
    classes.sort_unstable();
    classes.dedup();
    if classes.iter().any(|&c| c >= spec.num_classes) {
        return Err(Error::Domain("class subset contains an out-of-range class".into()));
    }
    let mut member = vec![false; spec.num_classes];
    for &c in &classes {
        member[c] = true;
    }

    let (inputs, labels) = dataset.read();
    let mut ws = Workspace::new(spec);
    let (mut total, mut correct, mut count) = (0.0, 0usize, 0usize);
    for (x, &label) in inputs.chunks_exact(dataset.dim()).zip(labels) {
        if label >= spec.num_classes || !member[label] {
            continue;
        }
        let logits = ws.forward(spec.activation, w.values(), x);
        total += log_sum_exp(logits, classes.iter().copied()) - logits[label];
        let mut best = classes[0];
        for &c in &classes[1..] {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        correct += usize::from(best == label);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("evaluation set is empty after class restriction".into()));
    }
    Ok(Evaluation {
        loss: total / count as f64,
        accuracy: correct as f64 / count as f64,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{interpolate, scale};
    use rand::Rng;

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n * spec.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        Batch::new(inputs, spec.input_dim, labels).unwrap()
    }

    #[test]
    fn linear_parameter_count() {
        let spec = ModelSpec::linear(4, 3);
        assert_eq!(spec.layout().total(), 15);
        assert_eq!(spec.num_params(), 15);
        let mlp = ModelSpec::mlp(4, vec![5, 6], 3, Activation::Relu);
        assert_eq!(mlp.layout().total(), 4 * 5 + 5 + 5 * 6 + 6 + 6 * 3 + 3);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::mlp(6, vec![8], 4, Activation::Tanh);
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), init_params(&spec, 8).values());
        for (seg, range) in a.layout().ranges() {
            if seg.name.ends_with("bias") {
                assert!(a.values()[range].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_weights_give_log_c() {
        for c in [2, 3, 7] {
            let spec = ModelSpec::linear(5, c);
            let w = ParamVector::zeros(spec.layout());
            let (loss, _) = loss_and_grad(&spec, &w, &random_batch(&spec, 9, 1)).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-15, "{loss}");
        }
    }

    #[test]
    fn duplicated_and_permuted_batches_agree() {
        let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Tanh);
        let w = init_params(&spec, 3);
        let batch = random_batch(&spec, 6, 2);
        let (l1, g1) = loss_and_grad(&spec, &w, &batch).unwrap();

        let mut inputs = batch.inputs().to_vec();
        inputs.extend_from_slice(batch.inputs());
        let mut labels = batch.labels().to_vec();
        labels.extend_from_slice(batch.labels());
        let doubled = Batch::new(inputs, 3, labels).unwrap();
        let (l2, g2) = loss_and_grad(&spec, &w, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-14);
        }

        let order = [3, 0, 5, 1, 4, 2];
        let inputs: Vec<f64> = order.iter().flat_map(|&i| batch.row(i).to_vec()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| batch.labels()[i]).collect();
        let (l3, g3) = loss_and_grad(&spec, &w, &Batch::new(inputs, 3, labels).unwrap()).unwrap();
        assert!((l1 - l3).abs() < 1e-14);
        for (a, b) in g1.values().iter().zip(g3.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let spec = ModelSpec::linear(2, 3);
        let w = scale(&init_params(&spec, 1), 1e4).unwrap();
        let batch = Batch::new(vec![50.0, -50.0, -30.0, 40.0], 2, vec![0, 2]).unwrap();
        let (loss, grad) = loss_and_grad(&spec, &w, &batch).unwrap();
        assert!(loss.is_finite());
        assert!(grad.values().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let spec = ModelSpec::linear(4, 3);
        let other = init_params(&ModelSpec::linear(3, 4), 0);
        let batch = random_batch(&spec, 2, 0);
        assert!(matches!(loss_and_grad(&spec, &other, &batch), Err(Error::Compatibility(_))));
    }

    #[test]
    fn linear_loss_is_convex_along_segments() {
        let spec = ModelSpec::linear(4, 3);
        let batch = random_batch(&spec, 12, 5);
        for seed in 0..20 {
            let a = scale(&init_params(&spec, seed), 3.0).unwrap();
            let b = scale(&init_params(&spec, 100 + seed), 3.0).unwrap();
            let la = loss(&spec, &a, &batch).unwrap();
            let lb = loss(&spec, &b, &batch).unwrap();
            for alpha in [0.1, 0.3, 0.5, 0.77, 0.9] {
                let mid = interpolate(&a, &b, alpha).unwrap();
                let lm = loss(&spec, &mid, &batch).unwrap();
                assert!(lm <= (1.0 - alpha) * la + alpha * lb + 1e-10);
            }
        }
    }

    #[test]
    fn loss_matches_loss_and_grad() {
        let spec = ModelSpec::mlp(3, vec![4, 2], 3, Activation::Relu);
        let w = init_params(&spec, 9);
        let batch = random_batch(&spec, 7, 9);
        let (l, _) = loss_and_grad(&spec, &w, &batch).unwrap();
        assert_eq!(l, loss(&spec, &w, &batch).unwrap());
    }
}
