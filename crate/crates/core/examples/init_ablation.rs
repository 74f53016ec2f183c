//! Random, averaged and global background initialization side by side.

use fsosr::{evaluate, generate_synthetic, InitKind, NormKind, RunConfig, SyntheticConfig};

fn main() -> fsosr::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig::benchmark(0))?.dataset;
    for init in [InitKind::Random, InitKind::AvgBackground, InitKind::Global] {
        let mut cfg = RunConfig {
            init,
            num_episodes: 40,
            master_seed: 3,
            ..RunConfig::default()
        };
        cfg.procam.norm_kind = NormKind::SpatialSoftmax;
        let g = evaluate(&ds, &cfg)?.aggregate;
        println!(
            "{init:?}: acc {:.4}  auroc {:.4}",
            g.mean_accuracy, g.mean_auroc
        );
    }
    Ok(())
}
