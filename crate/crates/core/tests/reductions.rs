mod common;

use common::*;
use mergetune::merge::{dare_delta, dare_merge, ties_merge};
use mergetune::mergetune::{alpha_grid, mergetune_loss_and_grad, run_mergetune, MergeTuneConfig};
use mergetune::model::{loss_and_grad, Activation, ModelSpec};
use mergetune::params::{self, ParamVector};
use mergetune::tasks::{BatchSampler, Dataset};
use mergetune::trainer::{train, Checkpoint, Provenance, ProvenanceKind};
use proptest::prelude::*;

fn spec() -> ModelSpec {
    ModelSpec::mlp(4, vec![6], 3, Activation::Tanh)
}

fn ckpt(spec: &ModelSpec, params: ParamVector, kind: ProvenanceKind) -> Checkpoint {
    Checkpoint::new(spec.clone(), params, Provenance::new(kind, "test"), 0).unwrap()
}

/// 12 examples with batch size 4 and one epoch: exactly 3 steps.
fn three_step_setup() -> (ModelSpec, Dataset, Checkpoint, Checkpoint) {
    let spec = spec();
    let mut r = rng(11);
    let batch = random_batch(&spec, 12, &mut r);
    let ds = Dataset::new(4, 3, batch.inputs().to_vec(), batch.labels().to_vec()).unwrap();
    let w1 = ckpt(&spec, random_params(&spec, 0.5, &mut r), ProvenanceKind::Pretrained);
    let w2 = ckpt(&spec, random_params(&spec, 0.5, &mut r), ProvenanceKind::Finetuned);
    (spec, ds, w1, w2)
}

fn three_step_config(lambda: f64, beta: f64) -> MergeTuneConfig {
    MergeTuneConfig {
        lambda,
        beta,
        ..MergeTuneConfig::with_optimizer(sgd_config(0.1, 1, 4, 5))
    }
}

#[test]
fn beta_zero_is_surrogate_regularized_sgd() {
    let (spec, ds, w1, w2) = three_step_setup();
    let config = three_step_config(8.0, 0.0);
    let ours = run_mergetune(&spec, &w1, &w2, &ds, &config).unwrap();

    let mut sampler = BatchSampler::new(ds.len(), 4, 5).unwrap();
    let mut w = params::interpolate(&w1.params, &w2.params, config.tau).unwrap().into_values();
    for _ in 0..3 {
        let batch = sampler.next_batch(&ds).unwrap();
        let current = with_values(&w1.params, w.clone());
        let (_, g) = loss_and_grad(&spec, &current, &batch).unwrap();
        for ((wi, gi), ai) in w.iter_mut().zip(g.values()).zip(w1.params.values()) {
            let step = gi + 2.0 * config.lambda * (*wi - ai);
            *wi += -0.1 * step;
        }
    }
    assert_eq!(ours.params.values(), &w[..]);
}

#[test]
fn beta_and_lambda_zero_is_plain_finetuning() {
    let (spec, ds, w1, w2) = three_step_setup();
    let config = three_step_config(0.0, 0.0);
    let ours = run_mergetune(&spec, &w1, &w2, &ds, &config).unwrap();
    let init = params::interpolate(&w1.params, &w2.params, config.tau).unwrap();
    let plain = train(&spec, init, &ds, &config.optimizer).unwrap();
    assert_eq!(ours.params.values(), plain.params.values());
}

#[test]
fn lmc_contribution_is_alpha_times_interpolated_gradient() {
    let spec = spec();
    let layout = spec.layout();
    let mut r = rng(21);
    let batch = random_batch(&spec, 8, &mut r);
    let w = random_params(&spec, 0.6, &mut r);
    let w2 = random_params(&spec, 0.6, &mut r);
    for n_alpha in [2, 5, 9] {
        for alpha in alpha_grid(n_alpha) {
            let w_interp = params::interpolate(&w2, &w, alpha).unwrap();
            let (_, g) = loss_and_grad(&spec, &w_interp, &batch).unwrap();
            let chain = params::scale(&g, alpha).unwrap();
            // d/dw L2(w2 + α(w − w2)), differentiated through the interpolation.
            let reference = dual_grad(&w, |v| dual_loss(&spec, &layout, &dual_interp(&w2, v, alpha), &batch));
            let err = max_abs_diff(chain.values(), &reference);
            assert!(err < 1e-10, "alpha {alpha}: {err:e}");
        }
    }
}

#[test]
fn full_mergetune_gradient_matches_dual_reference() {
    let spec = spec();
    let layout = spec.layout();
    let mut r = rng(22);
    let batch = random_batch(&spec, 8, &mut r);
    let (w, w1, w2) = (
        random_params(&spec, 0.6, &mut r),
        random_params(&spec, 0.6, &mut r),
        random_params(&spec, 0.6, &mut r),
    );
    let config = mt_config();
    let (_, grad) = mergetune_loss_and_grad(&spec, &w, &w1, &w2, &batch, &config).unwrap();
    let grid = alpha_grid(config.n_alpha);
    let mut reference = dual_grad(&w, |v| {
        let path = grid.iter().fold(Dual::constant(0.0), |acc, &a| {
            let l = dual_loss(&spec, &layout, &dual_interp(&w2, v, a), &batch);
            Dual { re: acc.re + l.re, du: acc.du + l.du }
        });
        let task = dual_loss(&spec, &layout, v, &batch);
        let scale = config.beta / grid.len() as f64;
        Dual { re: task.re + scale * path.re, du: task.du + scale * path.du }
    });
    for ((r, &wi), &ai) in reference.iter_mut().zip(w.values()).zip(w1.values()) {
        *r += 2.0 * config.lambda * (wi - ai);
    }
    assert!(max_abs_diff(grad.values(), &reference) < 1e-10);
}

#[test]
fn dare_without_drops_is_identity() {
    let spec = spec();
    let mut r = rng(31);
    for seed in 0..20 {
        let delta = random_params(&spec, 1.0, &mut r);
        assert_eq!(dare_delta(&delta, 0.0, seed).unwrap(), delta);
    }
}

#[test]
fn dare_rescaling_preserves_the_mean_delta() {
    let layout = mergetune::params::Layout::new(vec![mergetune::params::Segment::new("w", vec![20_000])]);
    let delta = ParamVector::new(layout, vec![1.0; 20_000]).unwrap();
    let out = dare_delta(&delta, 0.9, 3).unwrap();
    let mean = out.values().iter().sum::<f64>() / 20_000.0;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
    let base = ParamVector::zeros(delta.layout().clone());
    assert_eq!(dare_merge(&base, &delta, 0.9, 3).unwrap(), out);
}

#[test]
fn ties_single_delta_full_density_is_addition() {
    let spec = spec();
    let mut r = rng(41);
    for _ in 0..20 {
        let base = random_params(&spec, 1.0, &mut r);
        let delta = random_params(&spec, 1.0, &mut r);
        assert_eq!(
            ties_merge(&base, std::slice::from_ref(&delta), 1.0).unwrap(),
            params::add(&base, &delta).unwrap()
        );
    }
}

proptest! {
    #[test]
    fn ties_keeps_a_density_fraction_per_segment(seed in 0u64..1000, density in 0.05f64..1.0) {
        let spec = spec();
        let mut r = rng(seed);
        let base = ParamVector::zeros(spec.layout());
        let delta = random_params(&spec, 1.0, &mut r);
        let merged = ties_merge(&base, std::slice::from_ref(&delta), density).unwrap();
        for (seg, range) in spec.layout().ranges() {
            let kept = merged.values()[range.clone()].iter().filter(|v| **v != 0.0).count();
            let expected = ((density * seg.numel() as f64).ceil() as usize).clamp(1, seg.numel());
            prop_assert_eq!(kept, expected);
            for i in range {
                let m = merged.values()[i];
                prop_assert!(m == 0.0 || m == delta.values()[i]);
            }
        }
    }

    #[test]
    fn linear_merge_endpoints_are_exact(seed in 0u64..1000) {
        let spec = spec();
        let mut r = rng(seed);
        let a = random_params(&spec, 1.0, &mut r);
        let b = random_params(&spec, 1.0, &mut r);
        prop_assert_eq!(mergetune::merge::linear_merge(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(mergetune::merge::linear_merge(&a, &b, 1.0).unwrap(), b);
    }
}
