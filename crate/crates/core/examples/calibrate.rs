//! Per-seed calibration table for the benchmark.
//!
//! Prints the quantities the acceptance thresholds are pinned against:
//! novel-class forgetting, HM of each method, and both path barriers.
//!
//! `cargo run --release --example calibrate -- [config.txt] [seeds]`

use mergetune::harness::run::{score, Seeded};
use mergetune::harness::{prepare, ExperimentConfig};
use mergetune::landscape::{barrier, probe_path};
use mergetune::merge::linear_merge;
use mergetune::mergetune::run_mergetune;

fn main() -> mergetune::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first() {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);

    let (mut drops, mut wins, mut beats_linear, mut barrier_wins) = (Vec::new(), 0, 0, 0);
    for seed in 0..seeds {
        let config = ExperimentConfig { master_seed: seed, ..base.clone() };
        let ends = prepare(&config)?;
        let (spec, pair) = (&ends.spec, &ends.pair);
        let ours = run_mergetune(spec, &ends.zero_shot, &ends.finetuned, &pair.downstream_train, &Seeded::new(&config).mergetune)?;
        let lin = linear_merge(&ends.zero_shot.params, &ends.finetuned.params, 0.5)?;

        let w1 = score("zero_shot", spec, &ends.zero_shot.params, pair)?;
        let w2 = score("finetuned", spec, &ends.finetuned.params, pair)?;
        let mt = score("mergetune", spec, &ours.params, pair)?;
        let li = score("linear", spec, &lin, pair)?;
        let n = config.probe_points;
        let p12 = probe_path(spec, &ends.zero_shot.params, &ends.finetuned.params, n, &pair.downstream_train, None)?;
        let po2 = probe_path(spec, &ours.params, &ends.finetuned.params, n, &pair.downstream_train, None)?;

        let drop = w1.novel_accuracy - w2.novel_accuracy;
        drops.push(drop);
        wins += usize::from(mt.harmonic_mean > w2.harmonic_mean);
        beats_linear += usize::from(mt.harmonic_mean >= li.harmonic_mean);
        barrier_wins += usize::from(barrier(&p12) > barrier(&po2));
        println!(
            "seed {seed}: w1 {:.3}/{:.3} | w2 {:.3}/{:.3} hm {:.3} | ours hm {:.3} | linear hm {:.3} | drop {drop:.3} | barrier {:.4} vs {:.4}",
            w1.base_accuracy,
            w1.novel_accuracy,
            w2.base_accuracy,
            w2.novel_accuracy,
            w2.harmonic_mean,
            mt.harmonic_mean,
            li.harmonic_mean,
            barrier(&p12),
            barrier(&po2),
        );
    }
    let min_drop = drops.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "min drop {min_drop:.3} | ours>ft {wins}/{seeds} | ours>=linear {beats_linear}/{seeds} | barrier {barrier_wins}/{seeds}"
    );
    Ok(())
}
