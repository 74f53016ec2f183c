//! Few-shot open-set recognition over spatial feature maps.
//!
//! A query is classified against a bank of cosine prototypes: one row per
//! known class of the episode plus a few background rows that absorb
//! whatever does not belong to any known class. Background rows are trained
//! on embeddings mined from the support set with progressive class
//! activation maps, which repeatedly locate and mask the class evidence of a
//! support map until only its background remains.
//!
//! ```
//! use fsosr::{
//!     build_known_prototypes, init_background, predict, EmbeddingVector, InitStrategy, ScoreKind,
//! };
//!
//! let support = vec![
//!     (EmbeddingVector::new(vec![1.0, 0.0, 0.0])?, 0),
//!     (EmbeddingVector::new(vec![0.0, 1.0, 0.0])?, 1),
//! ];
//! let bank = build_known_prototypes(&support, 2, 1)?;
//! let bank = init_background(&bank, &InitStrategy::Random { seed: 7 }, 2, &[])?;
//! let p = predict(&bank, &EmbeddingVector::new(vec![0.9, 0.1, 0.0])?, ScoreKind::Margin)?;
//! assert_eq!(p.verdict, fsosr::Verdict::Known(0));
//! # Ok::<(), fsosr::Error>(())
//! ```

pub mod classifier;
pub mod episode;
pub mod error;
pub mod featmap;
pub mod finetune;
pub mod format;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
pub mod procam;

pub use classifier::{
    build_known_prototypes, cosine_scores, init_background, predict, InitStrategy, Prediction,
    PrototypeBank, ScoreKind, ScoreVector, Verdict,
};
pub use episode::{
    derive_seed, generate_synthetic, sample_episode, Episode, EpisodeSpec, FeatureDataset,
    SyntheticConfig, SyntheticDataset,
};
pub use error::{Error, Result};
pub use featmap::{
    mask_apply, minmax_norm, softmax_mask, spatial_avg_pool, spatial_softmax, ActivationMap,
    EmbeddingVector, FeatureMap,
};
pub use finetune::{
    ce_loss_cosine, episodic_loss, finetune_bank, grad_wrt_prototypes, train_adapter,
    AdapterEpisode, BatchItem, FinetuneConfig, LinearAdapter, LossReport,
};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport, Stencil};
pub use metrics::{accuracy, aggregate, auroc, mask_iou, AggregateMetrics, EpisodeMetrics};
pub use pipeline::{evaluate, mean_support_iou, run_eval, InitKind, ResultsBundle, RunConfig};
pub use procam::{cam, procam, procam_for_support, NormKind, ProCamConfig, ProCamResult};
