//! End-to-end episodic evaluation and the results bundle.
//!
//! Per episode: sample, pool, build known prototypes, attach background
//! prototypes, mine background embeddings with progressive CAM, fine-tune
//! the bank, score every query, and compute accuracy and AUROC. Stage
//! toggles reproduce the ablation ladder:
//!
//! | stage                    | settings                                                   |
//! |--------------------------|------------------------------------------------------------|
//! | plain prototypes         | `use_background_classes = false`                           |
//! | + background classes     | `use_background_classes`, `use_procam_finetune = false`    |
//! | + CAM fine-tune          | `use_procam_finetune`, `tau = 1`, `freeze_known`           |
//! | + fine-tune all          | as above without `freeze_known`                            |
//! | + progressive CAM        | `tau > 1`                                                  |

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    build_known_prototypes, init_background, predict, InitStrategy, PrototypeBank, ScoreKind,
    Verdict,
};
use crate::episode::{derive_seed, sample_episode, Episode, EpisodeSpec, FeatureDataset};
use crate::error::{Error, Result};
use crate::featmap::{spatial_avg_pool, ActivationMap, EmbeddingVector};
use crate::finetune::{finetune_bank, FinetuneConfig, LossReport};
use crate::format::read_dataset;
use crate::metrics::{accuracy, aggregate, auroc, mask_iou, AggregateMetrics, EpisodeMetrics};
use crate::procam::{procam, procam_for_support, ProCamConfig};

pub const BUNDLE_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "FSOSR_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Random,
    AvgBackground,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Episode shape; the seed field is ignored, each episode derives its
    /// own from `master_seed`.
    pub episode: EpisodeSpec,
    pub procam: ProCamConfig,
    pub finetune: FinetuneConfig,
    pub init: InitKind,
    pub num_background: usize,
    pub num_episodes: usize,
    pub use_background_classes: bool,
    pub use_procam_finetune: bool,
    pub score_kind: ScoreKind,
    /// Also report one AUROC over the scores of all episodes.
    pub pooled_auroc: bool,
    /// Keep every episode's final bank in the bundle.
    pub keep_banks: bool,
    pub master_seed: u64,
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            episode: EpisodeSpec::default(),
            procam: ProCamConfig::default(),
            finetune: FinetuneConfig::default(),
            init: InitKind::Random,
            num_background: 2,
            num_episodes: 600,
            use_background_classes: true,
            use_procam_finetune: true,
            score_kind: ScoreKind::Margin,
            pooled_auroc: false,
            keep_banks: false,
            master_seed: 0,
            workers: 1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// The plain prototype classifier with no background classes.
    pub fn baseline() -> Self {
        Self {
            use_background_classes: false,
            use_procam_finetune: false,
            score_kind: ScoreKind::NegMaxKnown,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.procam.validate()?;
        self.finetune.validate()?;
        if self.num_episodes == 0 {
            return Err(Error::InvalidConfig(
                "num_episodes must be at least 1".into(),
            ));
        }
        if self.use_background_classes && self.num_background == 0 {
            return Err(Error::InvalidConfig(
                "background classes enabled with num_background = 0".into(),
            ));
        }
        Ok(())
    }

    /// Score used for AUROC; without background rows only `NegMaxKnown` is
    /// meaningful.
    pub fn effective_score_kind(&self) -> ScoreKind {
        if self.use_background_classes {
            self.score_kind
        } else {
            ScoreKind::NegMaxKnown
        }
    }

    /// Worker count actually used: global initialization carries state from
    /// one episode to the next and runs on a single worker.
    pub fn effective_workers(&self) -> usize {
        if self.init == InitKind::Global && self.use_background_classes {
            1
        } else {
            self.workers.max(1)
        }
    }

    /// `output_dir`, else `$FSOSR_OUTPUT_DIR`, else `./results`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    pub loss: Option<LossReport>,
    #[serde(skip)]
    pub known_scores: Vec<f64>,
    #[serde(skip)]
    pub unknown_scores: Vec<f64>,
    #[serde(skip)]
    pub bank: Option<PrototypeBank>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsBundle {
    pub format_version: u32,
    pub episodes: Vec<EpisodeRecord>,
    pub aggregate: AggregateMetrics,
    pub pooled_auroc: Option<f64>,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct CsvRow {
    episode: usize,
    seed: u64,
    accuracy: f64,
    auroc: f64,
    n_known: usize,
    n_unknown: usize,
    loss_initial: Option<f64>,
    loss_final: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    format_version: u32,
    aggregate: &'a AggregateMetrics,
    pooled_auroc: Option<f64>,
    config: &'a RunConfig,
}

impl ResultsBundle {
    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.episodes {
            w.serialize(CsvRow {
                episode: r.episode,
                seed: r.seed,
                accuracy: r.metrics.accuracy,
                auroc: r.metrics.auroc,
                n_known: r.metrics.n_known,
                n_unknown: r.metrics.n_unknown,
                loss_initial: r
                    .loss
                    .as_ref()
                    .and_then(|l| l.per_epoch_totals.first().copied()),
                loss_final: r.loss.as_ref().map(|l| l.total),
            })?;
        }
        w.into_inner()
            .map_err(|e| Error::io("episodes.csv", e.into_error()))
    }

    pub fn summary_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&Summary {
            format_version: self.format_version,
            aggregate: &self.aggregate,
            pooled_auroc: self.pooled_auroc,
            config: &self.config,
        })?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn banks_json(&self) -> Result<Option<Vec<u8>>> {
        if !self.config.keep_banks {
            return Ok(None);
        }
        let banks: Vec<Option<&PrototypeBank>> =
            self.episodes.iter().map(|r| r.bank.as_ref()).collect();
        Ok(Some(serde_json::to_vec(&banks)?))
    }

    /// Writes `episodes.csv`, `summary.json` and, when banks are kept,
    /// `banks.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        put("episodes.csv", self.csv()?)?;
        put("summary.json", self.summary_json()?)?;
        if let Some(banks) = self.banks_json()? {
            put("banks.json", banks)?;
        }
        Ok(())
    }
}

fn pool_all(items: &[(crate::featmap::FeatureMap, usize)]) -> Vec<(EmbeddingVector, usize)> {
    items
        .iter()
        .map(|(f, y)| (spatial_avg_pool(f), *y))
        .collect()
}

/// Background prototypes persisted across episodes by global initialization.
type Persisted = Option<Vec<Vec<f64>>>;

/// Runs one sampled episode through the configured pipeline.
pub fn evaluate_episode(
    episode: &Episode,
    cfg: &RunConfig,
    seed: u64,
    persisted: &Persisted,
) -> Result<(EpisodeRecord, Persisted)> {
    let spec = &cfg.episode;
    let support = pool_all(&episode.support);
    let mut bank = build_known_prototypes(&support, spec.n_way, spec.k_shot)?;
    let mut loss = None;
    let mut next_persisted = persisted.clone();

    if cfg.use_background_classes {
        let needs_mining = cfg.use_procam_finetune || cfg.init == InitKind::AvgBackground;
        let backgrounds: Vec<EmbeddingVector> = if needs_mining {
            procam_for_support(&episode.support, &bank, &cfg.procam)?
                .into_iter()
                .map(|s| s.background)
                .collect()
        } else {
            Vec::new()
        };
        let strategy = match cfg.init {
            InitKind::Random => InitStrategy::Random {
                seed: derive_seed(seed, 1),
            },
            InitKind::AvgBackground => InitStrategy::AvgBackground,
            InitKind::Global => InitStrategy::Global {
                seed: derive_seed(cfg.master_seed, u64::MAX),
                persisted: persisted.clone(),
            },
        };
        bank = init_background(&bank, &strategy, cfg.num_background, &backgrounds)?;
        if cfg.use_procam_finetune {
            let (tuned, report) = finetune_bank(&bank, &support, &backgrounds, &cfg.finetune)?;
            bank = tuned;
            loss = Some(report);
        }
        if cfg.init == InitKind::Global {
            next_persisted = Some(bank.background_weights().to_vec());
        }
    }

    let kind = cfg.effective_score_kind();
    let mut verdicts = Vec::with_capacity(episode.known_queries.len());
    let mut known_scores = Vec::with_capacity(episode.known_queries.len());
    for (f, y) in &episode.known_queries {
        let p = predict(&bank, &spatial_avg_pool(f), kind)?;
        verdicts.push((p.verdict, *y));
        known_scores.push(p.unknownness);
    }
    let unknown_scores = episode
        .unknown_queries
        .iter()
        .map(|f| Ok(predict(&bank, &spatial_avg_pool(f), kind)?.unknownness))
        .collect::<Result<Vec<f64>>>()?;
    let metrics = EpisodeMetrics {
        accuracy: accuracy(&verdicts)?,
        auroc: auroc(&known_scores, &unknown_scores)?,
        n_known: known_scores.len(),
        n_unknown: unknown_scores.len(),
    };
    Ok((
        EpisodeRecord {
            episode: 0,
            seed,
            metrics,
            loss,
            known_scores,
            unknown_scores,
            bank: cfg.keep_banks.then_some(bank),
        },
        next_persisted,
    ))
}

fn run_one(
    ds: &FeatureDataset,
    cfg: &RunConfig,
    e: usize,
    persisted: &Persisted,
) -> Result<(EpisodeRecord, Persisted)> {
    let seed = derive_seed(cfg.master_seed, e as u64);
    let spec = EpisodeSpec {
        seed,
        ..cfg.episode
    };
    let episode = sample_episode(ds, &spec)?;
    let (mut record, next) = evaluate_episode(&episode, cfg, seed, persisted)?;
    record.episode = e;
    Ok((record, next))
}

/// Evaluates `cfg.num_episodes` episodes on an in-memory dataset.
pub fn evaluate(ds: &FeatureDataset, cfg: &RunConfig) -> Result<ResultsBundle> {
    cfg.validate()?;
    cfg.episode.check_dataset(ds)?;

    let workers = cfg.effective_workers();
    let episodes: Vec<EpisodeRecord> = if workers == 1 {
        let mut persisted = None;
        let mut out = Vec::with_capacity(cfg.num_episodes);
        for e in 0..cfg.num_episodes {
            let (record, next) = run_one(ds, cfg, e, &persisted)?;
            persisted = next;
            out.push(record);
        }
        out
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..cfg.num_episodes)
                .into_par_iter()
                .map(|e| run_one(ds, cfg, e, &None).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let per_episode: Vec<EpisodeMetrics> = episodes.iter().map(|r| r.metrics).collect();
    let pooled_auroc = if cfg.pooled_auroc {
        let known: Vec<f64> = episodes
            .iter()
            .flat_map(|r| r.known_scores.clone())
            .collect();
        let unknown: Vec<f64> = episodes
            .iter()
            .flat_map(|r| r.unknown_scores.clone())
            .collect();
        Some(auroc(&known, &unknown)?)
    } else {
        None
    };
    Ok(ResultsBundle {
        format_version: BUNDLE_VERSION,
        aggregate: aggregate(&per_episode)?,
        pooled_auroc,
        episodes,
        config: cfg.clone(),
    })
}

/// Reads `cfg.dataset`, evaluates, and writes the bundle to the output
/// directory.
pub fn run_eval(cfg: &RunConfig) -> Result<ResultsBundle> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no dataset path given".into()))?;
    cfg.validate()?;
    let ds = read_dataset(path)?;
    let bundle = evaluate(&ds, cfg)?;
    bundle.write(&cfg.resolved_output_dir())?;
    Ok(bundle)
}

/// Mean IoU between the ProCAM foreground mask of every support item and its
/// ground-truth mask over the episodes of `cfg`. Masks are computed from the
/// known prototypes before any fine-tuning and thresholded at `threshold`.
pub fn mean_support_iou(
    ds: &FeatureDataset,
    truth: &[ActivationMap],
    cfg: &RunConfig,
    threshold: f64,
) -> Result<f64> {
    cfg.validate()?;
    cfg.episode.check_dataset(ds)?;
    if truth.len() != ds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} masks for {} items",
            truth.len(),
            ds.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for e in 0..cfg.num_episodes {
        let spec = EpisodeSpec {
            seed: derive_seed(cfg.master_seed, e as u64),
            ..cfg.episode
        };
        let episode = sample_episode(ds, &spec)?;
        let support = pool_all(&episode.support);
        let bank = build_known_prototypes(&support, spec.n_way, spec.k_shot)?;
        for ((f, y), &index) in episode.support.iter().zip(&episode.support_indices) {
            let result = procam(f, &bank.known_weights()[*y], &cfg.procam)?;
            sum += mask_iou(&result.final_mask, &truth[index], threshold)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Fraction of known queries predicted as `Unknown`.
pub fn rejection_rate(verdicts: &[Verdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts
        .iter()
        .filter(|v| matches!(v, Verdict::Unknown(_)))
        .count() as f64
        / verdicts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{generate_synthetic, SyntheticConfig};

    fn small_ds() -> FeatureDataset {
        let mut cfg = SyntheticConfig::benchmark(1);
        cfg.items_per_class = 12;
        generate_synthetic(&cfg).unwrap().dataset
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            num_episodes: 3,
            episode: EpisodeSpec {
                n_query: 5,
                n_open_query: 5,
                ..EpisodeSpec::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn baseline_forces_neg_max_known() {
        let ds = small_ds();
        let cfg = RunConfig {
            score_kind: ScoreKind::Margin,
            ..RunConfig {
                num_episodes: 2,
                ..RunConfig::baseline()
            }
        };
        let mut cfg = cfg;
        cfg.episode = small_cfg().episode;
        let b = evaluate(&ds, &cfg).unwrap();
        assert!(b.episodes.iter().all(|r| r.loss.is_none()));
        let mut explicit = cfg.clone();
        explicit.score_kind = ScoreKind::NegMaxKnown;
        assert_eq!(evaluate(&ds, &explicit).unwrap().aggregate, b.aggregate);
    }

    #[test]
    fn every_ladder_stage_runs() {
        let ds = small_ds();
        let base = small_cfg();
        let stages = [
            RunConfig {
                use_background_classes: false,
                ..base.clone()
            },
            RunConfig {
                use_procam_finetune: false,
                ..base.clone()
            },
            RunConfig {
                procam: ProCamConfig {
                    tau: 1,
                    ..base.procam
                },
                finetune: FinetuneConfig {
                    freeze_known: true,
                    ..base.finetune
                },
                ..base.clone()
            },
            RunConfig {
                procam: ProCamConfig {
                    tau: 1,
                    ..base.procam
                },
                ..base.clone()
            },
            base.clone(),
        ];
        for cfg in stages {
            let b = evaluate(&ds, &cfg).unwrap();
            assert_eq!(b.episodes.len(), 3);
        }
    }

    #[test]
    fn errors_surface_before_episodes() {
        let ds = small_ds();
        let cfg = RunConfig {
            episode: EpisodeSpec {
                n_way: 18,
                ..small_cfg().episode
            },
            ..small_cfg()
        };
        assert!(matches!(
            evaluate(&ds, &cfg),
            Err(Error::InsufficientClasses { .. })
        ));
        assert!(run_eval(&RunConfig::default()).is_err());
    }

    #[test]
    fn pooled_and_banks() {
        let ds = small_ds();
        let cfg = RunConfig {
            pooled_auroc: true,
            keep_banks: true,
            ..small_cfg()
        };
        let b = evaluate(&ds, &cfg).unwrap();
        let p = b.pooled_auroc.unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(b.banks_json().unwrap().is_some());
        assert!(b
            .episodes
            .iter()
            .all(|r| r.bank.as_ref().unwrap().num_background() == 2));
    }

    #[test]
    fn global_init_carries_rows() {
        let ds = small_ds();
        let cfg = RunConfig {
            init: InitKind::Global,
            keep_banks: true,
            workers: 4,
            ..small_cfg()
        };
        assert_eq!(cfg.effective_workers(), 1);
        let b = evaluate(&ds, &cfg).unwrap();
        assert_eq!(b.episodes.len(), 3);
    }

    #[test]
    fn support_iou_of_benchmark_masks() {
        let syn = generate_synthetic(&SyntheticConfig {
            items_per_class: 12,
            ..SyntheticConfig::benchmark(1)
        })
        .unwrap();
        let cfg = small_cfg();
        let iou = mean_support_iou(&syn.dataset, &syn.masks, &cfg, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&iou));
        assert!(mean_support_iou(&syn.dataset, &syn.masks[1..], &cfg, 0.5).is_err());
    }

    #[test]
    fn rejection_rate_counts_unknowns() {
        assert_eq!(rejection_rate(&[]), 0.0);
        assert_eq!(
            rejection_rate(&[Verdict::Known(0), Verdict::Unknown(1)]),
            0.5
        );
    }
}
