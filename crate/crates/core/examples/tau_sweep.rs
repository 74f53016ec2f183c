//! Foreground IoU and AUROC as the number of CAM iterations grows.

use fsosr::{evaluate, generate_synthetic, mean_support_iou, NormKind, RunConfig, SyntheticConfig};

fn main() -> fsosr::Result<()> {
    let syn = generate_synthetic(&SyntheticConfig::benchmark(0))?;
    for tau in 1..=4 {
        let mut cfg = RunConfig {
            num_episodes: 40,
            master_seed: 9,
            ..RunConfig::default()
        };
        cfg.procam.tau = tau;
        cfg.procam.norm_kind = NormKind::SpatialSoftmax;
        let iou = mean_support_iou(&syn.dataset, &syn.masks, &cfg, 0.5)?;
        let auroc = evaluate(&syn.dataset, &cfg)?.aggregate.mean_auroc;
        println!("tau {tau}: iou {iou:.4}  auroc {auroc:.4}");
    }
    Ok(())
}
