//! Prototype classifier bank: known-class prototypes averaged from support
//! embeddings, extra background prototypes that reserve embedding space for
//! unknowns, and cosine-similarity scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{dot, norm, EmbeddingVector, EPS_NORM};

/// Joint classifier `[W_k, W_bkg]`, one row per class.
///
/// Rows `0..num_known` are known classes, rows `num_known..num_known +
/// num_background` are background classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    dim: usize,
    known: Vec<Vec<f64>>,
    background: Vec<Vec<f64>>,
}

impl PrototypeBank {
    pub fn new(known: Vec<Vec<f64>>, background: Vec<Vec<f64>>) -> Result<Self> {
        let dim = known
            .first()
            .map(Vec::len)
            .ok_or(Error::Empty("known prototypes"))?;
        if dim == 0 {
            return Err(Error::Empty("prototype row"));
        }
        for row in known.iter().chain(&background) {
            if row.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "prototype row has length {}, bank dimension is {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("prototype row"));
            }
        }
        Ok(Self {
            dim,
            known,
            background,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }

    pub fn num_background(&self) -> usize {
        self.background.len()
    }

    pub fn num_classes(&self) -> usize {
        self.known.len() + self.background.len()
    }

    pub fn known_weights(&self) -> &[Vec<f64>] {
        &self.known
    }

    pub fn background_weights(&self) -> &[Vec<f64>] {
        &self.background
    }

    /// Row `j` of the concatenated bank.
    pub fn row(&self, j: usize) -> &[f64] {
        if j < self.known.len() {
            &self.known[j]
        } else {
            &self.background[j - self.known.len()]
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.known.iter().chain(&self.background).map(Vec::as_slice)
    }

    /// Same known rows, background rows replaced.
    pub fn with_background(&self, background: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.known.clone(), background)
    }

    /// Rebuilds a bank from `num_classes()` rows in concatenated order.
    pub(crate) fn replace_rows(&self, mut rows: Vec<Vec<f64>>) -> Result<Self> {
        let background = rows.split_off(self.known.len());
        Self::new(rows, background)
    }
}

/// How background rows are initialized before fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Fresh uniform `[-1/sqrt(d), 1/sqrt(d)]` rows every episode.
    Random { seed: u64 },
    /// Rows are means of the episode's background embeddings.
    AvgBackground,
    /// Rows persist across episodes. `persisted` is `None` on first use, in
    /// which case rows are drawn as in `Random`.
    Global {
        seed: u64,
        persisted: Option<Vec<Vec<f64>>>,
    },
}

/// Known-class prototypes: `w_i` is the mean of the `k_shot` support
/// embeddings of class `i`.
///
/// Each coordinate is summed in ascending value order, so any permutation of
/// the support list gives bit-identical prototypes.
pub fn build_known_prototypes(
    support: &[(EmbeddingVector, usize)],
    n_way: usize,
    k_shot: usize,
) -> Result<PrototypeBank> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidSupport(format!(
            "n_way and k_shot must be positive, got {n_way} and {k_shot}"
        )));
    }
    let dim = support
        .first()
        .map(|(e, _)| e.dim())
        .ok_or(Error::Empty("support set"))?;
    let mut by_class: Vec<Vec<&[f64]>> = vec![Vec::new(); n_way];
    for (emb, label) in support {
        if *label >= n_way {
            return Err(Error::LabelOutOfRange {
                label: *label,
                classes: n_way,
            });
        }
        if emb.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "support embedding has dimension {}, expected {dim}",
                emb.dim()
            )));
        }
        by_class[*label].push(emb.as_slice());
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() != k_shot {
            return Err(Error::InvalidSupport(format!(
                "class {class} has {} shots, expected {k_shot}",
                members.len()
            )));
        }
    }

    let mut known = Vec::with_capacity(n_way);
    let mut column = Vec::with_capacity(k_shot);
    for (class, members) in by_class.iter().enumerate() {
        let mut proto = Vec::with_capacity(dim);
        for c in 0..dim {
            column.clear();
            column.extend(members.iter().map(|m| m[c]));
            column.sort_by(f64::total_cmp);
            proto.push(column.iter().sum::<f64>() / k_shot as f64);
        }
        if norm(&proto) <= EPS_NORM {
            return Err(Error::ZeroNorm {
                what: "prototype",
                index: class,
            });
        }
        known.push(proto);
    }
    PrototypeBank::new(known, Vec::new())
}

fn random_rows(seed: u64, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..=bound)).collect())
        .collect()
}

/// Attaches `num_background` background rows to `bank` (replacing any it
/// already has).
///
/// `AvgBackground` splits `bkg_embeddings` round-robin by index into
/// `num_background` groups and averages each.
pub fn init_background(
    bank: &PrototypeBank,
    strategy: &InitStrategy,
    num_background: usize,
    bkg_embeddings: &[EmbeddingVector],
) -> Result<PrototypeBank> {
    let dim = bank.dim();
    let rows = match strategy {
        InitStrategy::Random { seed } => random_rows(*seed, num_background, dim),
        InitStrategy::Global { seed, persisted } => match persisted {
            Some(rows) => {
                if rows.len() != num_background {
                    return Err(Error::InvalidConfig(format!(
                        "persisted background has {} rows, expected {num_background}",
                        rows.len()
                    )));
                }
                rows.clone()
            }
            None => random_rows(*seed, num_background, dim),
        },
        InitStrategy::AvgBackground => {
            if num_background == 0 {
                Vec::new()
            } else {
                if bkg_embeddings.is_empty() {
                    return Err(Error::Empty("background embeddings for average init"));
                }
                if bkg_embeddings.len() < num_background {
                    return Err(Error::InvalidConfig(format!(
                        "{} background embeddings cannot fill {num_background} rows",
                        bkg_embeddings.len()
                    )));
                }
                let mut rows = vec![vec![0.0; dim]; num_background];
                let mut counts = vec![0usize; num_background];
                for (i, emb) in bkg_embeddings.iter().enumerate() {
                    if emb.dim() != dim {
                        return Err(Error::ShapeMismatch(format!(
                            "background embedding has dimension {}, bank has {dim}",
                            emb.dim()
                        )));
                    }
                    let slot = i % num_background;
                    counts[slot] += 1;
                    for (r, v) in rows[slot].iter_mut().zip(emb.as_slice()) {
                        *r += v;
                    }
                }
                for (row, n) in rows.iter_mut().zip(counts) {
                    row.iter_mut().for_each(|r| *r /= n as f64);
                }
                rows
            }
        }
    };
    bank.with_background(rows)
}

/// Cosine similarities of one query against every row of a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub known: Vec<f64>,
    pub background: Vec<f64>,
}

impl ScoreVector {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.known.iter().chain(&self.background).copied()
    }

    /// Index of the highest score over the concatenated vector; ties go to
    /// the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.all())
    }
}

pub(crate) fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

pub(crate) fn cosine(w: &[f64], q: &[f64]) -> f64 {
    dot(w, q) / (norm(w) * norm(q))
}

pub(crate) fn check_norms(bank: &PrototypeBank, query: &[f64]) -> Result<()> {
    if query.len() != bank.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query has dimension {}, bank has {}",
            query.len(),
            bank.dim()
        )));
    }
    if norm(query) <= EPS_NORM {
        return Err(Error::ZeroNorm {
            what: "query",
            index: 0,
        });
    }
    for (j, row) in bank.rows().enumerate() {
        if norm(row) <= EPS_NORM {
            return Err(Error::ZeroNorm {
                what: "prototype row",
                index: j,
            });
        }
    }
    Ok(())
}

pub fn cosine_scores(bank: &PrototypeBank, query: &EmbeddingVector) -> Result<ScoreVector> {
    let q = query.as_slice();
    check_norms(bank, q)?;
    let qn = norm(q);
    let score = |w: &Vec<f64>| (dot(w, q) / (norm(w) * qn)).clamp(-1.0, 1.0);
    Ok(ScoreVector {
        known: bank.known.iter().map(score).collect(),
        background: bank.background.iter().map(score).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known(usize),
    /// Index within the background rows.
    Unknown(usize),
}

/// Continuous score used to rank queries for unknown detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `max(background) - max(known)`; with no background rows the
    /// background maximum is taken as zero.
    #[default]
    Margin,
    /// `-max(known)`.
    NegMaxKnown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub verdict: Verdict,
    pub unknownness: f64,
}

pub fn predict(
    bank: &PrototypeBank,
    query: &EmbeddingVector,
    kind: ScoreKind,
) -> Result<Prediction> {
    let scores = cosine_scores(bank, query)?;
    let best = scores.argmax();
    let verdict = if best < bank.num_known() {
        Verdict::Known(best)
    } else {
        Verdict::Unknown(best - bank.num_known())
    };
    let max_known = scores
        .known
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let unknownness = match kind {
        ScoreKind::Margin => {
            let max_bkg = scores
                .background
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let max_bkg = if max_bkg.is_finite() { max_bkg } else { 0.0 };
            max_bkg - max_known
        }
        ScoreKind::NegMaxKnown => -max_known,
    };
    Ok(Prediction {
        verdict,
        unknownness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn one_shot_prototype_is_the_support() {
        let support = vec![(emb(&[1.0, 2.0]), 0), (emb(&[-3.0, 0.5]), 1)];
        let bank = build_known_prototypes(&support, 2, 1).unwrap();
        assert_eq!(bank.known_weights()[0], vec![1.0, 2.0]);
        assert_eq!(bank.known_weights()[1], vec![-3.0, 0.5]);
        assert_eq!(bank.num_background(), 0);
    }

    #[test]
    fn two_shot_midpoint() {
        let support = vec![(emb(&[1.0, 0.0]), 0), (emb(&[0.0, 1.0]), 0)];
        let bank = build_known_prototypes(&support, 1, 2).unwrap();
        assert_eq!(bank.known_weights()[0], vec![0.5, 0.5]);
    }

    #[test]
    fn prototype_errors() {
        let uneven = vec![(emb(&[1.0]), 0), (emb(&[1.0]), 0), (emb(&[1.0]), 1)];
        assert!(matches!(
            build_known_prototypes(&uneven, 2, 1),
            Err(Error::InvalidSupport(_))
        ));
        let cancel = vec![(emb(&[1.0, -1.0]), 0), (emb(&[-1.0, 1.0]), 0)];
        assert!(matches!(
            build_known_prototypes(&cancel, 1, 2),
            Err(Error::ZeroNorm { index: 0, .. })
        ));
        let bad_label = vec![(emb(&[1.0]), 3)];
        assert!(matches!(
            build_known_prototypes(&bad_label, 2, 1),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let bank = PrototypeBank::new(vec![vec![1.0; 640]], vec![]).unwrap();
        let s = InitStrategy::Random { seed: 42 };
        let a = init_background(&bank, &s, 3, &[]).unwrap();
        let b = init_background(&bank, &s, 3, &[]).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 640f64.sqrt();
        assert!(a
            .background_weights()
            .iter()
            .flatten()
            .all(|v| v.abs() <= bound));
        let c = init_background(&bank, &InitStrategy::Random { seed: 43 }, 3, &[]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn avg_init() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![]).unwrap();
        let e = [emb(&[2.0, 0.0]), emb(&[0.0, 2.0])];
        let out = init_background(&bank, &InitStrategy::AvgBackground, 1, &e).unwrap();
        assert_eq!(out.background_weights(), &[vec![1.0, 1.0]]);
        let e = [emb(&[2.0, 0.0]), emb(&[0.0, 2.0]), emb(&[4.0, 0.0])];
        let out = init_background(&bank, &InitStrategy::AvgBackground, 2, &e).unwrap();
        assert_eq!(out.background_weights(), &[vec![3.0, 0.0], vec![0.0, 2.0]]);
        assert!(matches!(
            init_background(&bank, &InitStrategy::AvgBackground, 1, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn global_init_uses_persisted_rows() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![]).unwrap();
        let fresh = init_background(
            &bank,
            &InitStrategy::Global {
                seed: 7,
                persisted: None,
            },
            1,
            &[],
        )
        .unwrap();
        let random = init_background(&bank, &InitStrategy::Random { seed: 7 }, 1, &[]).unwrap();
        assert_eq!(fresh, random);
        let kept = init_background(
            &bank,
            &InitStrategy::Global {
                seed: 7,
                persisted: Some(vec![vec![0.25, -0.5]]),
            },
            1,
            &[],
        )
        .unwrap();
        assert_eq!(kept.background_weights(), &[vec![0.25, -0.5]]);
    }

    #[test]
    fn cosine_examples() {
        let bank =
            PrototypeBank::new(vec![vec![1.0, 0.0], vec![0.0, 2.0]], vec![vec![1.0, 1.0]]).unwrap();
        let s = cosine_scores(&bank, &emb(&[5.0, 0.0])).unwrap();
        assert!((s.known[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.known[1], 0.0);
        assert!((s.background[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_rows_are_named() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            cosine_scores(&bank, &emb(&[1.0, 1.0])),
            Err(Error::ZeroNorm { index: 1, .. })
        ));
        assert!(matches!(
            cosine_scores(&bank, &emb(&[0.0, 0.0])),
            Err(Error::ZeroNorm { what: "query", .. })
        ));
    }

    #[test]
    fn predict_examples() {
        let bank = PrototypeBank::new(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![1.0, 1.0, 0.0],
            ],
            vec![vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let p = predict(&bank, &emb(&[1.0, 1.0, 0.0]), ScoreKind::Margin).unwrap();
        assert_eq!(p.verdict, Verdict::Known(2));
        assert!(p.unknownness < 0.0);
        let p = predict(&bank, &emb(&[0.0, 0.0, 3.0]), ScoreKind::Margin).unwrap();
        assert_eq!(p.verdict, Verdict::Unknown(0));
        assert!(p.unknownness > 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![vec![2.0, 0.0]]).unwrap();
        let p = predict(&bank, &emb(&[1.0, 0.0]), ScoreKind::Margin).unwrap();
        assert_eq!(p.verdict, Verdict::Known(0));
        assert_eq!(p.unknownness, 0.0);
    }

    #[test]
    fn no_background_never_unknown() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![]).unwrap();
        for kind in [ScoreKind::Margin, ScoreKind::NegMaxKnown] {
            let p = predict(&bank, &emb(&[-1.0, 0.1]), kind).unwrap();
            assert_eq!(p.verdict, Verdict::Known(0));
        }
    }
}
