//! Baseline prototype classifier against the full pipeline on the synthetic
//! benchmark.

use fsosr::{evaluate, generate_synthetic, NormKind, RunConfig, SyntheticConfig};

fn main() -> fsosr::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig::benchmark(0))?.dataset;
    let episodes = 60;

    let base = RunConfig {
        num_episodes: episodes,
        master_seed: 11,
        ..RunConfig::baseline()
    };
    let mut full = RunConfig {
        num_episodes: episodes,
        master_seed: 11,
        ..RunConfig::default()
    };
    full.procam.norm_kind = NormKind::SpatialSoftmax;

    for (name, cfg) in [("baseline", base), ("full", full)] {
        let g = evaluate(&ds, &cfg)?.aggregate;
        println!(
            "{name:<9} acc {:.4} +- {:.4}   auroc {:.4} +- {:.4}",
            g.mean_accuracy, g.ci95_accuracy, g.mean_auroc, g.ci95_auroc
        );
    }
    Ok(())
}
