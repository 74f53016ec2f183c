//! Closed-set accuracy, unknown-detection AUROC and multi-episode
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::classifier::Verdict;
use crate::error::{Error, Result};
use crate::featmap::ActivationMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub accuracy: f64,
    pub auroc: f64,
    pub n_known: usize,
    pub n_unknown: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mean_accuracy: f64,
    pub mean_auroc: f64,
    pub ci95_accuracy: f64,
    pub ci95_auroc: f64,
    pub n_episodes: usize,
}

/// Fraction of known queries predicted as their true class. `Unknown`
/// verdicts count as errors.
pub fn accuracy(predictions: &[(Verdict, usize)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let correct = predictions
        .iter()
        .filter(|(v, truth)| *v == Verdict::Known(*truth))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Mann-Whitney estimate of the probability that an unknown query scores
/// above a known one, ties counting one half.
///
/// Computed from midranks of the pooled scores in `O(n log n)`.
pub fn auroc(known_scores: &[f64], unknown_scores: &[f64]) -> Result<f64> {
    if known_scores.is_empty() {
        return Err(Error::Empty("known scores"));
    }
    if unknown_scores.is_empty() {
        return Err(Error::Empty("unknown scores"));
    }
    if known_scores
        .iter()
        .chain(unknown_scores)
        .any(|s| s.is_nan())
    {
        return Err(Error::NonFinite("auroc scores"));
    }
    let mut pooled: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, false))
        .chain(unknown_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let midrank = (i + 1 + j) as f64 / 2.0;
        let unknown_in_group = pooled[i..j].iter().filter(|p| p.1).count();
        rank_sum += midrank * unknown_in_group as f64;
        i = j;
    }
    let nu = unknown_scores.len() as f64;
    let nk = known_scores.len() as f64;
    Ok((rank_sum - nu * (nu + 1.0) / 2.0) / (nu * nk))
}

/// Means and `1.96 * sd / sqrt(n)` intervals, folded in episode order. `sd`
/// is the population standard deviation.
pub fn aggregate(per_episode: &[EpisodeMetrics]) -> Result<AggregateMetrics> {
    if per_episode.is_empty() {
        return Err(Error::Empty("episode metrics"));
    }
    let n = per_episode.len() as f64;
    let stats = |get: fn(&EpisodeMetrics) -> f64| {
        let mean = per_episode.iter().map(get).sum::<f64>() / n;
        let var = per_episode
            .iter()
            .map(|m| (get(m) - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, 1.96 * var.sqrt() / n.sqrt())
    };
    let (mean_accuracy, ci95_accuracy) = stats(|m| m.accuracy);
    let (mean_auroc, ci95_auroc) = stats(|m| m.auroc);
    Ok(AggregateMetrics {
        mean_accuracy,
        mean_auroc,
        ci95_accuracy,
        ci95_auroc,
        n_episodes: per_episode.len(),
    })
}

/// Intersection over union of `{mask >= threshold}` against a binary ground
/// truth (`truth > 0.5`). Two empty sets give 1.
pub fn mask_iou(mask: &ActivationMap, truth: &ActivationMap, threshold: f64) -> Result<f64> {
    if mask.height() != truth.height() || mask.width() != truth.width() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs truth {}x{}",
            mask.height(),
            mask.width(),
            truth.height(),
            truth.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &t) in mask.values().iter().zip(truth.values()) {
        let (a, b) = (m >= threshold, t > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(known: &[f64], unknown: &[f64]) -> f64 {
        let mut s = 0.0;
        for &u in unknown {
            for &k in known {
                if u > k {
                    s += 1.0;
                } else if u == k {
                    s += 0.5;
                }
            }
        }
        s / (known.len() * unknown.len()) as f64
    }

    #[test]
    fn accuracy_examples() {
        let all = [(Verdict::Known(0), 0), (Verdict::Known(3), 3)];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let unk = [(Verdict::Unknown(0), 0), (Verdict::Unknown(1), 2)];
        assert_eq!(accuracy(&unk).unwrap(), 0.0);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn accuracy_matches_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let preds: Vec<(Verdict, usize)> = (0..75)
            .map(|_| {
                let truth = rng.random_range(0..5);
                let v = if rng.random_bool(0.2) {
                    Verdict::Unknown(0)
                } else {
                    Verdict::Known(rng.random_range(0..5))
                };
                (v, truth)
            })
            .collect();
        let mut correct = 0;
        for (v, t) in &preds {
            if let Verdict::Known(c) = v {
                if c == t {
                    correct += 1;
                }
            }
        }
        assert_eq!(accuracy(&preds).unwrap(), correct as f64 / 75.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[1.0; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3, 0.9], &[0.1, 0.2]).unwrap(), 0.0);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let k: Vec<f64> = (0..40).map(|_| rng.random_range(0..10) as f64).collect();
            let u: Vec<f64> = (0..40).map(|_| rng.random_range(2..12) as f64).collect();
            assert!((auroc(&k, &u).unwrap() - pairwise(&k, &u)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let m = |a| EpisodeMetrics {
            accuracy: a,
            auroc: 0.7,
            n_known: 10,
            n_unknown: 10,
        };
        let single = aggregate(&[m(0.8)]).unwrap();
        assert_eq!(single.mean_accuracy, 0.8);
        assert_eq!(single.ci95_accuracy, 0.0);
        let two = aggregate(&[m(0.8), m(0.9)]).unwrap();
        assert!((two.mean_accuracy - 0.85).abs() < 1e-15);
        assert!((two.ci95_accuracy - 1.96 * 0.05 / 2f64.sqrt()).abs() < 1e-15);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_matches_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(600);
        let eps: Vec<EpisodeMetrics> = (0..600)
            .map(|_| EpisodeMetrics {
                accuracy: rng.random_range(0.0..1.0),
                auroc: rng.random_range(0.0..1.0),
                n_known: 75,
                n_unknown: 75,
            })
            .collect();
        let (mut sa, mut sb, mut qa, mut qb) = (0.0, 0.0, 0.0, 0.0);
        for e in &eps {
            sa += e.accuracy;
            sb += e.auroc;
            qa += e.accuracy * e.accuracy;
            qb += e.auroc * e.auroc;
        }
        let n = 600.0;
        let (ma, mb) = (sa / n, sb / n);
        let ci = |q: f64, m: f64| 1.96 * (q / n - m * m).sqrt() / n.sqrt();
        let agg = aggregate(&eps).unwrap();
        assert!((agg.mean_accuracy - ma).abs() < 1e-12);
        assert!((agg.mean_auroc - mb).abs() < 1e-12);
        assert!((agg.ci95_accuracy - ci(qa, ma)).abs() < 1e-12);
        assert!((agg.ci95_auroc - ci(qb, mb)).abs() < 1e-12);
        assert_eq!(agg.n_episodes, 600);
    }

    #[test]
    fn mask_iou_examples() {
        let m = ActivationMap::new(1, 4, vec![0.9, 0.6, 0.2, 0.0]).unwrap();
        let t = ActivationMap::new(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((mask_iou(&m, &t, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = ActivationMap::filled(1, 4, 0.0).unwrap();
        assert_eq!(mask_iou(&z, &z, 0.5).unwrap(), 1.0);
        let other = ActivationMap::filled(2, 2, 0.0).unwrap();
        assert!(mask_iou(&z, &other, 0.5).is_err());
    }
}
