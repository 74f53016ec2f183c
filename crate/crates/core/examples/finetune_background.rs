//! Fine-tunes a bank with random background rows on the ProCAM background
//! embeddings of one episode and prints the loss curve.

use fsosr::{
    build_known_prototypes, derive_seed, finetune_bank, generate_synthetic, init_background,
    procam_for_support, sample_episode, spatial_avg_pool, EpisodeSpec, FinetuneConfig,
    InitStrategy, NormKind, ProCamConfig, SyntheticConfig,
};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt()
}

fn main() -> fsosr::Result<()> {
    let syn = generate_synthetic(&SyntheticConfig::benchmark(0))?;
    let spec = EpisodeSpec {
        seed: derive_seed(5, 0),
        ..EpisodeSpec::default()
    };
    let ep = sample_episode(&syn.dataset, &spec)?;
    let support: Vec<_> = ep
        .support
        .iter()
        .map(|(f, y)| (spatial_avg_pool(f), *y))
        .collect();
    let bank = build_known_prototypes(&support, 5, 5)?;
    let procam_cfg = ProCamConfig {
        norm_kind: NormKind::SpatialSoftmax,
        ..ProCamConfig::default()
    };
    let backgrounds: Vec<_> = procam_for_support(&ep.support, &bank, &procam_cfg)?
        .into_iter()
        .map(|s| s.background)
        .collect();
    let bank = init_background(&bank, &InitStrategy::Random { seed: 1 }, 2, &backgrounds)?;
    let (tuned, report) = finetune_bank(&bank, &support, &backgrounds, &FinetuneConfig::default())?;

    for (epoch, loss) in report.per_epoch_totals.iter().enumerate().step_by(4) {
        println!("epoch {epoch:>2}  loss {loss:.4}");
    }
    let mean_bkg: Vec<f64> = (0..bank.dim())
        .map(|c| {
            backgrounds.iter().map(|b| b.as_slice()[c]).sum::<f64>() / backgrounds.len() as f64
        })
        .collect();
    for (j, (before, after)) in bank
        .background_weights()
        .iter()
        .zip(tuned.background_weights())
        .enumerate()
    {
        println!(
            "background row {j}: cosine to mean background {:.3} -> {:.3}",
            cos(before, &mean_bkg),
            cos(after, &mean_bkg)
        );
    }
    Ok(())
}
