//! Trains a linear embedding adapter on episodic open-set loss with fixed
//! background rows.

use fsosr::finetune::adapter_loss;
use fsosr::{
    derive_seed, generate_synthetic, sample_episode, spatial_avg_pool, AdapterEpisode, EpisodeSpec,
    FinetuneConfig, LinearAdapter, SyntheticConfig,
};

fn main() -> fsosr::Result<()> {
    let cfg = SyntheticConfig {
        noise_sigma: 0.4,
        ..SyntheticConfig::new(10, 12, 8, 8, 16, 0)
    };
    let syn = generate_synthetic(&cfg)?;
    let spec = EpisodeSpec {
        n_query: 5,
        n_open_query: 5,
        ..EpisodeSpec::default()
    };
    let d = cfg.channels;
    let mut background = vec![vec![0.0; d]; 2];
    background[0][cfg.num_classes] = 1.0;
    background[1][d - 1] = 1.0;

    let episodes = (0..8)
        .map(|e| {
            let ep = sample_episode(
                &syn.dataset,
                &EpisodeSpec {
                    seed: derive_seed(4, e),
                    ..spec
                },
            )?;
            let pool = |items: &[(fsosr::FeatureMap, usize)]| {
                items
                    .iter()
                    .map(|(f, y)| (spatial_avg_pool(f), *y))
                    .collect::<Vec<_>>()
            };
            Ok(AdapterEpisode {
                n_way: spec.n_way,
                k_shot: spec.k_shot,
                support: pool(&ep.support),
                known_queries: pool(&ep.known_queries),
                unknown_queries: ep.unknown_queries.iter().map(spatial_avg_pool).collect(),
                background: background.clone(),
            })
        })
        .collect::<fsosr::Result<Vec<_>>>()?;

    let ft = FinetuneConfig {
        learning_rate: 0.05,
        ..FinetuneConfig::default()
    };
    let mean_loss = |a: &LinearAdapter| -> fsosr::Result<f64> {
        let mut s = 0.0;
        for ep in &episodes {
            s += adapter_loss(a, ep, ft.episodic_lambda(), ft.temperature)?.total;
        }
        Ok(s / episodes.len() as f64)
    };
    let mut adapter = LinearAdapter::identity(d);
    println!("step   0  mean episodic loss {:.4}", mean_loss(&adapter)?);
    for round in 1..=4 {
        adapter = fsosr::train_adapter(&adapter, &episodes, &ft, 20)?;
        println!(
            "step {:>3}  mean episodic loss {:.4}",
            round * 20,
            mean_loss(&adapter)?
        );
    }
    Ok(())
}
