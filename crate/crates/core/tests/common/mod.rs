//! Shared test oracles, written independently of the library internals.
#![allow(dead_code)]

use mergetune::model::{Activation, Batch, ModelSpec};
use mergetune::mergetune::MergeTuneConfig;
use mergetune::params::ParamVector;
use mergetune::trainer::{LrSchedule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps this file free of the library's sampling code.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_params(spec: &ModelSpec, scale: f64, rng: &mut ChaCha8Rng) -> ParamVector {
    let layout = spec.layout();
    let values = (0..layout.total()).map(|_| scale * normal(rng)).collect();
    ParamVector::new(layout, values).unwrap()
}

pub fn random_batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let inputs = (0..n * spec.input_dim).map(|_| normal(rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    Batch::new(inputs, spec.input_dim, labels).unwrap()
}

/// The model matrix used across gradient tests.
pub fn spec_matrix() -> Vec<ModelSpec> {
    let mut specs = vec![ModelSpec::linear(4, 3)];
    for act in [Activation::Tanh, Activation::Relu] {
        specs.push(ModelSpec::mlp(4, vec![5], 3, act));
        specs.push(ModelSpec::mlp(4, vec![5, 3], 3, act));
    }
    specs
}

/// Forward pass from the segment layout: returns logits and the smallest
/// |pre-activation| seen in hidden layers.
pub fn oracle_logits(spec: &ModelSpec, w: &ParamVector, x: &[f64]) -> (Vec<f64>, f64) {
    let n_layers = spec.hidden_dims.len() + 1;
    let mut h = x.to_vec();
    let mut min_pre = f64::INFINITY;
    for l in 0..n_layers {
        let weight = w.segment(&format!("layer{l}.weight")).unwrap();
        let bias = w.segment(&format!("layer{l}.bias")).unwrap();
        let out = bias.len();
        let inp = h.len();
        assert_eq!(weight.len(), out * inp);
        let mut z = vec![0.0; out];
        for o in 0..out {
            z[o] = bias[o] + (0..inp).map(|i| weight[o * inp + i] * h[i]).sum::<f64>();
        }
        if l + 1 < n_layers {
            for v in z.iter_mut() {
                min_pre = min_pre.min(v.abs());
                *v = match spec.activation {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                };
            }
        }
        h = z;
    }
    (h, min_pre)
}

/// Mean cross-entropy computed from [`oracle_logits`].
pub fn oracle_loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (z, _) = oracle_logits(spec, w, batch.row(i));
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[batch.labels()[i]];
    }
    total / batch.len() as f64
}

pub fn min_preactivation(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> f64 {
    (0..batch.len())
        .map(|i| oracle_logits(spec, w, batch.row(i)).1)
        .fold(f64::INFINITY, f64::min)
}

pub fn with_values(w: &ParamVector, values: Vec<f64>) -> ParamVector {
    ParamVector::new(w.layout().clone(), values).unwrap()
}

/// Central differences of `f` at `w` with step `h`.
pub fn central_diff(w: &ParamVector, h: f64, mut f: impl FnMut(&ParamVector) -> f64) -> Vec<f64> {
    let base = w.values().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            (f(&with_values(w, plus)) - f(&with_values(w, minus))) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, 1)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|)` over coordinates where either
/// side exceeds `floor`.
pub fn max_strict_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

pub fn sgd_config(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate,
        epochs,
        batch_size,
        seed,
        lr_schedule: LrSchedule::Constant,
    }
}

/// Default weighting with a small constant-rate optimizer.
pub fn mt_config() -> MergeTuneConfig {
    MergeTuneConfig::with_optimizer(sgd_config(0.02, 1, 16, 0))
}

/// Forward-mode dual number `re + ε·du`.
#[derive(Debug, Clone, Copy)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
    fn mul(self, o: Dual) -> Dual {
        Dual { re: self.re * o.re, du: self.du * o.re + self.re * o.du }
    }
    fn exp(self) -> Dual {
        let e = self.re.exp();
        Dual { re: e, du: self.du * e }
    }
    fn ln(self) -> Dual {
        Dual { re: self.re.ln(), du: self.du / self.re }
    }
    fn tanh(self) -> Dual {
        let t = self.re.tanh();
        Dual { re: t, du: self.du * (1.0 - t * t) }
    }
    fn relu(self) -> Dual {
        if self.re > 0.0 {
            self
        } else {
            Dual::constant(0.0)
        }
    }
}

/// Mean cross-entropy with dual-valued parameters in layout order.
pub fn dual_loss(spec: &ModelSpec, layout: &mergetune::params::Layout, w: &[Dual], batch: &Batch) -> Dual {
    let n_layers = spec.hidden_dims.len() + 1;
    let mut total = Dual::constant(0.0);
    for i in 0..batch.len() {
        let mut h: Vec<Dual> = batch.row(i).iter().map(|&x| Dual::constant(x)).collect();
        for l in 0..n_layers {
            let wr = layout.range_of(&format!("layer{l}.weight")).unwrap();
            let br = layout.range_of(&format!("layer{l}.bias")).unwrap();
            let inp = h.len();
            let mut z: Vec<Dual> = (0..br.len())
                .map(|o| {
                    (0..inp).fold(w[br.start + o], |acc, k| acc.add(w[wr.start + o * inp + k].mul(h[k])))
                })
                .collect();
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = match spec.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.relu(),
                    };
                }
            }
            h = z;
        }
        let m = h.iter().map(|d| d.re).fold(f64::NEG_INFINITY, f64::max);
        let shift = Dual::constant(-m);
        let sum = h.iter().fold(Dual::constant(0.0), |acc, z| acc.add(z.add(shift).exp()));
        let lse = sum.ln().add(Dual::constant(m));
        let y = h[batch.labels()[i]];
        total = total.add(lse.add(y.mul(Dual::constant(-1.0))));
    }
    total.mul(Dual::constant(1.0 / batch.len() as f64))
}

/// Exact gradient of `v ↦ f(v)` by one dual pass per coordinate, where `f`
/// receives dual parameters.
pub fn dual_grad(w: &ParamVector, f: impl Fn(&[Dual]) -> Dual) -> Vec<f64> {
    let n = w.len();
    (0..n)
        .map(|i| {
            let v: Vec<Dual> = w
                .values()
                .iter()
                .enumerate()
                .map(|(j, &x)| Dual { re: x, du: if i == j { 1.0 } else { 0.0 } })
                .collect();
            f(&v).du
        })
        .collect()
}

/// `a + α(v − a)` with dual `v`.
pub fn dual_interp(a: &ParamVector, v: &[Dual], alpha: f64) -> Vec<Dual> {
    a.values()
        .iter()
        .zip(v)
        .map(|(&ai, &vi)| Dual::constant(ai).add(Dual::constant(alpha).mul(vi.add(Dual::constant(-ai)))))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
