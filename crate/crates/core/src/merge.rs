//! Training-free merging baselines: linear averaging, TIES and DARE.
//!
//! In experiments the base is the zero-shot checkpoint and the single delta
//! is `finetuned - zero_shot`; the TIES API accepts any number of deltas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, ParamVector};
use crate::trainer::{Checkpoint, Provenance, ProvenanceKind};

pub const DEFAULT_DARE_DROP_P: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Linear,
    Ties,
    Dare,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MergeMethod::Linear),
            "ties" => Ok(MergeMethod::Ties),
            "dare" => Ok(MergeMethod::Dare),
            other => Err(Error::Config(format!("unknown merge method `{other}`"))),
        }
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Mixing weight for `linear`.
    pub alpha: f64,
    /// Fraction of coordinates TIES keeps per segment.
    pub density: f64,
    /// DARE drop probability.
    pub drop_p: f64,
    pub seed: u64,
}

impl MergeConfig {
    pub fn linear(alpha: f64) -> Self {
        Self {
            method: MergeMethod::Linear,
            alpha,
            ..Self::default()
        }
    }

    pub fn ties(density: f64) -> Self {
        Self {
            method: MergeMethod::Ties,
            density,
            ..Self::default()
        }
    }

    pub fn dare(drop_p: f64, seed: u64) -> Self {
        Self {
            method: MergeMethod::Dare,
            drop_p,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            MergeMethod::Linear if !(0.0..=1.0).contains(&self.alpha) => {
                Err(Error::Domain(format!("linear alpha {} outside [0, 1]", self.alpha)))
            }
            MergeMethod::Ties if !(self.density > 0.0 && self.density <= 1.0) => {
                Err(Error::Domain(format!("TIES density {} outside (0, 1]", self.density)))
            }
            MergeMethod::Dare if !(0.0..1.0).contains(&self.drop_p) => {
                Err(Error::Domain(format!("DARE drop_p {} outside [0, 1)", self.drop_p)))
            }
            _ => Ok(()),
        }
    }

    /// Short name used for report rows, e.g. `ties@0.2`.
    pub fn label(&self) -> String {
        match self.method {
            MergeMethod::Linear => format!("linear@{}", self.alpha),
            MergeMethod::Ties => format!("ties@{}", self.density),
            MergeMethod::Dare => format!("dare@{}", self.drop_p),
        }
    }
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Linear,
            alpha: 0.5,
            density: 0.2,
            drop_p: DEFAULT_DARE_DROP_P,
            seed: 0,
        }
    }
}

/// `(1 - alpha) * w1 + alpha * w2`; identical to [`params::interpolate`].
pub fn linear_merge(w1: &ParamVector, w2: &ParamVector, alpha: f64) -> Result<ParamVector> {
    params::interpolate(w1, w2, alpha)
}

/// Keeps the `⌈density·n⌉` largest-magnitude entries of every segment and
/// zeroes the rest. Magnitude ties keep the lower index.
fn trim(delta: &ParamVector, density: f64) -> Vec<f64> {
    let values = delta.values();
    let mut out = vec![0.0; values.len()];
    for (_, range) in delta.layout().ranges() {
        let n = range.len();
        if n == 0 {
            continue;
        }
        let keep = ((density * n as f64).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = range.clone().collect();
        idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        for &i in &idx[..keep] {
            out[i] = values[i];
        }
    }
    out
}

/// Elected sign per coordinate: sign of the sum of trimmed values; on an
/// exact zero sum, the sign of the largest-magnitude entry; otherwise `+`.
fn elect_sign(column: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = column.clone().sum();
    if total > 0.0 {
        return 1.0;
    }
    if total < 0.0 {
        return -1.0;
    }
    let mut best = 0.0f64;
    let mut tied = false;
    for v in column {
        if v.abs() > best.abs() {
            best = v;
            tied = false;
        } else if v != 0.0 && v.abs() == best.abs() && v.signum() != best.signum() {
            tied = true;
        }
    }
    if best < 0.0 && !tied {
        -1.0
    } else {
        1.0
    }
}

/// TIES merging: trim, elect sign, disjoint mean.
pub fn ties_merge(base: &ParamVector, deltas: &[ParamVector], density: f64) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(Error::Domain("TIES needs at least one delta".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Domain(format!("TIES density {density} outside (0, 1]")));
    }
    for d in deltas {
        base.check_compatible(d)?;
    }
    let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| trim(d, density)).collect();
    let merged: Vec<f64> = (0..base.len())
        .map(|i| {
            let column = trimmed.iter().map(move |t| t[i]);
            let sign = elect_sign(column.clone());
            let (sum, count) = column
                .filter(|&v| v != 0.0 && v.signum() == sign)
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    let merged = ParamVector::new(base.layout().clone(), merged)?;
    params::add(base, &merged)
}

/// The DARE transform of `delta`: each coordinate dropped with probability
/// `drop_p`, survivors rescaled by `1 / (1 - drop_p)`.
pub fn dare_delta(delta: &ParamVector, drop_p: f64, seed: u64) -> Result<ParamVector> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::Domain(format!("DARE drop_p {drop_p} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rescale = 1.0 / (1.0 - drop_p);
    let values = delta
        .values()
        .iter()
        .map(|&d| if rng.random::<f64>() < drop_p { 0.0 } else { d * rescale })
        .collect();
    ParamVector::new(delta.layout().clone(), values)
}

/// DARE merging: `base + dare_delta(delta)`.
pub fn dare_merge(base: &ParamVector, delta: &ParamVector, drop_p: f64, seed: u64) -> Result<ParamVector> {
    base.check_compatible(delta)?;
    params::add(base, &dare_delta(delta, drop_p, seed)?)
}

/// Merges a zero-shot and a fine-tuned checkpoint with the configured method.
pub fn merge_checkpoints(zero_shot: &Checkpoint, finetuned: &Checkpoint, config: &MergeConfig) -> Result<Checkpoint> {
    config.validate()?;
    if zero_shot.spec != finetuned.spec {
        return Err(Error::Compatibility("checkpoints have different model specs".into()));
    }
    let w1 = &zero_shot.params;
    let w2 = &finetuned.params;
    let params = match config.method {
        MergeMethod::Linear => linear_merge(w1, w2, config.alpha)?,
        MergeMethod::Ties => ties_merge(w1, &[params::sub(w2, w1)?], config.density)?,
        MergeMethod::Dare => dare_merge(w1, &params::sub(w2, w1)?, config.drop_p, config.seed)?,
    };
    let lineage = format!(
        "{} of [{}] and [{}]",
        config.label(),
        zero_shot.provenance.lineage,
        finetuned.provenance.lineage
    );
    Checkpoint::new(
        zero_shot.spec.clone(),
        params,
        Provenance::new(ProvenanceKind::Merged, lineage),
        config.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Layout, Segment};
    use proptest::prelude::*;

    fn flat(values: Vec<f64>) -> ParamVector {
        let layout = Layout::new(vec![Segment::new("w", vec![values.len()])]);
        ParamVector::new(layout, values).unwrap()
    }

    #[test]
    fn linear_merge_cases() {
        let a = flat(vec![2.0, 0.0]);
        let b = flat(vec![0.0, 2.0]);
        assert_eq!(linear_merge(&a, &b, 0.0).unwrap(), a);
        assert_eq!(linear_merge(&a, &b, 0.5).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn ties_single_delta_full_density_is_addition() {
        let base = flat(vec![1.0, -2.0, 0.5]);
        let delta = flat(vec![0.3, -0.7, 0.0]);
        let out = ties_merge(&base, std::slice::from_ref(&delta), 1.0).unwrap();
        assert_eq!(out, params::add(&base, &delta).unwrap());
    }

    #[test]
    fn ties_hand_example() {
        // Trim keeps [0.9, 0] and [0.8, 0]; coordinate 0 elects +, mean 0.85;
        // coordinate 1 has no survivors.
        let base = flat(vec![0.0, 0.0]);
        let out = ties_merge(&base, &[flat(vec![0.9, -0.1]), flat(vec![0.8, 0.3])], 0.5).unwrap();
        assert!((out.values()[0] - 0.85).abs() < 1e-15);
        assert_eq!(out.values()[1], 0.0);
    }

    #[test]
    fn ties_opposite_deltas_use_tie_rule() {
        // Sums cancel exactly and magnitudes tie, so the elected sign is +
        // and each coordinate keeps |d_i|.
        let d = flat(vec![0.5, -1.5, 2.0, 0.0]);
        let neg = params::scale(&d, -1.0).unwrap();
        let base = flat(vec![0.0; 4]);
        let out = ties_merge(&base, &[d, neg], 1.0).unwrap();
        assert_eq!(out.values(), &[0.5, 1.5, 2.0, 0.0]);
    }

    #[test]
    fn ties_zero_sum_prefers_largest_magnitude() {
        // 0.5 + 0.5 - 1.0 = 0: the largest entry is -1.0, so - is elected.
        let base = flat(vec![0.0]);
        let out = ties_merge(&base, &[flat(vec![0.5]), flat(vec![0.5]), flat(vec![-1.0])], 1.0).unwrap();
        assert_eq!(out.values(), &[-1.0]);
    }

    #[test]
    fn ties_trims_per_segment() {
        let layout = Layout::new(vec![Segment::new("big", vec![4]), Segment::new("small", vec![2])]);
        let base = ParamVector::zeros(layout.clone());
        let delta = ParamVector::new(layout, vec![10.0, 9.0, 8.0, 7.0, 0.1, 0.2]).unwrap();
        let out = ties_merge(&base, &[delta], 0.5).unwrap();
        // A global top-3 would drop the whole small segment.
        assert_eq!(out.values(), &[10.0, 9.0, 0.0, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn ties_rejects_bad_input() {
        let base = flat(vec![0.0, 0.0]);
        assert!(ties_merge(&base, &[], 0.5).is_err());
        assert!(ties_merge(&base, &[flat(vec![1.0, 1.0])], 0.0).is_err());
        assert!(matches!(ties_merge(&base, &[flat(vec![1.0])], 1.0), Err(Error::Compatibility(_))));
    }

    #[test]
    fn dare_cases() {
        let base = flat(vec![1.0, 2.0, 3.0]);
        let delta = flat(vec![0.1, -0.2, 0.3]);
        assert_eq!(dare_merge(&base, &delta, 0.0, 9).unwrap(), params::add(&base, &delta).unwrap());
        assert_eq!(dare_merge(&base, &delta, 0.5, 9).unwrap(), dare_merge(&base, &delta, 0.5, 9).unwrap());
        assert!(matches!(dare_merge(&base, &delta, 1.0, 9), Err(Error::Domain(_))));
    }

    #[test]
    fn dare_is_unbiased_monte_carlo() {
        // E[transformed delta] = delta; per coordinate the estimator has
        // variance d² p / (1 - p), so the mean over N seeds lies within
        // 3·|d|·sqrt(p / ((1 - p) N)) of d with high probability.
        let delta = flat(vec![0.7, -1.3, 0.05, 2.0]);
        let p = DEFAULT_DARE_DROP_P;
        let n = 10_000;
        let mut sums = vec![0.0; delta.len()];
        for seed in 0..n {
            let t = dare_delta(&delta, p, seed as u64).unwrap();
            for (s, v) in sums.iter_mut().zip(t.values()) {
                *s += v;
            }
        }
        for (s, d) in sums.iter().zip(delta.values()) {
            let mean = s / n as f64;
            let sigma = d.abs() * (p / ((1.0 - p) * n as f64)).sqrt();
            assert!((mean - d).abs() <= 3.0 * sigma, "mean {mean} vs {d} (3σ = {})", 3.0 * sigma);
        }
    }

    proptest! {
        #[test]
        fn dare_outputs_are_zero_or_rescaled(
            delta in prop::collection::vec(-5.0..5.0f64, 12),
            p in 0.0..0.95f64,
            seed in any::<u64>(),
        ) {
            let base = flat(vec![0.25; 12]);
            let d = flat(delta);
            let out = dare_merge(&base, &d, p, seed).unwrap();
            for (o, di) in out.values().iter().zip(d.values()) {
                let dropped = *o == 0.25;
                let kept = *o == 0.25 + di * (1.0 / (1.0 - p));
                prop_assert!(dropped || kept);
            }
        }

        #[test]
        fn ties_same_sign_full_density_is_mean(
            mags in prop::collection::vec(prop::collection::vec(0.01..3.0f64, 6), 1..4),
            signs in prop::collection::vec(any::<bool>(), 6),
        ) {
            let base = flat(vec![0.5; 6]);
            let deltas: Vec<ParamVector> = mags
                .iter()
                .map(|m| flat(m.iter().zip(&signs).map(|(v, &s)| if s { *v } else { -*v }).collect()))
                .collect();
            let out = ties_merge(&base, &deltas, 1.0).unwrap();
            prop_assert!(out.is_compatible(&base));
            for i in 0..6 {
                let mean = deltas.iter().map(|d| d.values()[i]).sum::<f64>() / deltas.len() as f64;
                prop_assert!((out.values()[i] - (0.5 + mean)).abs() <= 1e-12);
            }
        }
    }
}
