//! Progressive CAM on one benchmark item: per-iteration coverage, IoU of the
//! final mask and PGM exports for both normalizations.

use fsosr::format::export_heatmap;
use fsosr::{
    build_known_prototypes, generate_synthetic, mask_iou, procam, spatial_avg_pool, NormKind,
    ProCamConfig, SyntheticConfig,
};

fn main() -> fsosr::Result<()> {
    let syn = generate_synthetic(&SyntheticConfig::benchmark(3))?;
    let ds = &syn.dataset;
    let item = 7;
    let (f, label) = &ds.items()[item];
    let support: Vec<_> = ds.class_items(*label)[..5]
        .iter()
        .map(|&i| (spatial_avg_pool(&ds.items()[i].0), 0))
        .collect();
    let bank = build_known_prototypes(&support, 1, 5)?;
    let out = std::env::temp_dir().join("fsosr_heatmaps");
    std::fs::create_dir_all(&out).map_err(|e| fsosr::Error::io(&out, e))?;

    for (name, norm_kind) in [
        ("minmax", NormKind::MinMax),
        ("softmax", NormKind::SpatialSoftmax),
    ] {
        let cfg = ProCamConfig {
            tau: 4,
            norm_kind,
            include_trace: true,
        };
        let r = procam(f, &bank.known_weights()[0], &cfg)?;
        for (i, m) in r.per_iteration_masks.iter().flatten().enumerate() {
            let coverage = m.values().iter().sum::<f64>() / m.values().len() as f64;
            println!("{name} iteration {}: mean activation {coverage:.3}", i + 1);
            export_heatmap(m, &out.join(format!("{name}_iter{}.pgm", i + 1)))?;
        }
        export_heatmap(&r.final_mask, &out.join(format!("{name}_final.pgm")))?;
        let iou = mask_iou(&r.final_mask, &syn.masks[item], 0.5)?;
        println!("{name} final mask IoU {iou:.3}");
    }
    println!("heatmaps in {}", out.display());
    Ok(())
}
