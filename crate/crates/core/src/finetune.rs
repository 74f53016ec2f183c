//! Cross-entropy over temperature-scaled cosine similarities, its analytic
//! gradients, and the two training procedures built on them:
//!
//! * [`finetune_bank`] fine-tunes the prototype bank on support embeddings
//!   (true labels) and background embeddings (pseudo-labelled with their
//!   nearest background row), leaving the embeddings fixed.
//! * [`train_adapter`] trains a `d x d` linear map applied to raw
//!   embeddings with the episodic open-set loss.
//!
//! All gradients are derived by hand. For `s = w.q / (|w| |q|)`:
//!
//! ```text
//! ds/dw = q / (|w| |q|) - s w / |w|^2
//! ds/dq = w / (|w| |q|) - s q / |q|^2
//! ```
//!
//! and for `L = -log softmax(T s)[y]`, `dL/ds_j = T (p_j - [j == y])`.

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, build_known_prototypes, check_norms, PrototypeBank};
use crate::error::{Error, Result};
use crate::featmap::{dot, norm, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the background term.
    pub lambda_bkg: f64,
    /// Separate weight for the episodic unknown-query term; falls back to
    /// `lambda_bkg`.
    pub lambda_episodic: Option<f64>,
    /// Softmax scale applied to cosine scores.
    pub temperature: f64,
    /// Recompute background pseudo-labels every epoch instead of once.
    pub reassign_each_epoch: bool,
    /// Keep known rows fixed; only background rows move.
    pub freeze_known: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.002,
            lambda_bkg: 0.05,
            lambda_episodic: None,
            temperature: 10.0,
            reassign_each_epoch: true,
            freeze_known: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        positive("lambda_bkg", self.lambda_bkg)?;
        if let Some(l) = self.lambda_episodic {
            positive("lambda_episodic", l)?;
        }
        positive("temperature", self.temperature)
    }

    pub fn episodic_lambda(&self) -> f64 {
        self.lambda_episodic.unwrap_or(self.lambda_bkg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_known: f64,
    pub loss_background: f64,
    pub total: f64,
    /// Total loss before each epoch's step, followed by the final loss.
    pub per_epoch_totals: Vec<f64>,
}

impl LossReport {
    fn new(loss_known: f64, loss_background: f64, lambda: f64) -> Self {
        Self {
            loss_known,
            loss_background,
            total: loss_known + lambda * loss_background,
            per_epoch_totals: Vec::new(),
        }
    }
}

/// One weighted training example.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub embedding: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

/// Cross-entropy of one query and the gradients with respect to every row
/// and the query, scaled by `weight` and accumulated into the buffers.
fn ce_backward(
    rows: &[&[f64]],
    query: &[f64],
    label: usize,
    temperature: f64,
    weight: f64,
    grad_rows: Option<&mut [Vec<f64>]>,
    grad_query: Option<&mut [f64]>,
) -> f64 {
    let qn = norm(query);
    let row_norms: Vec<f64> = rows.iter().map(|w| norm(w)).collect();
    let sims: Vec<f64> = rows
        .iter()
        .zip(&row_norms)
        .map(|(w, wn)| dot(w, query) / (wn * qn))
        .collect();
    let logits: Vec<f64> = sims.iter().map(|s| temperature * s).collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - peak).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let loss = denom.ln() + peak - logits[label];

    if grad_rows.is_none() && grad_query.is_none() {
        return loss;
    }
    // dL/ds_j, already weighted
    let dsim: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let target = if j == label { 1.0 } else { 0.0 };
            weight * temperature * (e / denom - target)
        })
        .collect();
    if let Some(grad_rows) = grad_rows {
        for (j, g) in grad_rows.iter_mut().enumerate() {
            let (w, wn, s) = (rows[j], row_norms[j], sims[j]);
            let a = dsim[j] / (wn * qn);
            let b = dsim[j] * s / (wn * wn);
            for ((gi, qi), wi) in g.iter_mut().zip(query).zip(w) {
                *gi += a * qi - b * wi;
            }
        }
    }
    if let Some(grad_query) = grad_query {
        for (j, w) in rows.iter().enumerate() {
            let (wn, s) = (row_norms[j], sims[j]);
            let a = dsim[j] / (wn * qn);
            let b = dsim[j] * s / (qn * qn);
            for ((gi, qi), wi) in grad_query.iter_mut().zip(query).zip(w.iter()) {
                *gi += a * wi - b * qi;
            }
        }
    }
    loss
}

fn check_label(bank: &PrototypeBank, label: usize) -> Result<()> {
    if label >= bank.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: bank.num_classes(),
        });
    }
    Ok(())
}

fn bank_rows(bank: &PrototypeBank) -> Vec<&[f64]> {
    bank.rows().collect()
}

/// `-log softmax(temperature * scores)[label]`.
pub fn ce_loss_cosine(
    bank: &PrototypeBank,
    embedding: &EmbeddingVector,
    label: usize,
    temperature: f64,
) -> Result<f64> {
    check_label(bank, label)?;
    check_norms(bank, embedding.as_slice())?;
    Ok(ce_backward(
        &bank_rows(bank),
        embedding.as_slice(),
        label,
        temperature,
        1.0,
        None,
        None,
    ))
}

/// Gradient of `sum_i weight_i * CE_i` with respect to every bank row, in
/// concatenated (known, then background) order. Accumulation follows batch
/// order.
pub fn grad_wrt_prototypes(
    bank: &PrototypeBank,
    batch: &[BatchItem<'_>],
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    Ok(loss_and_grad(bank, batch, temperature)?.1)
}

fn loss_and_grad(
    bank: &PrototypeBank,
    batch: &[BatchItem<'_>],
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    for item in batch {
        if item.weight.is_nan() || item.weight <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "batch weights must be positive, got {}",
                item.weight
            )));
        }
        check_label(bank, item.label)?;
        check_norms(bank, item.embedding)?;
    }
    let rows = bank_rows(bank);
    let mut grad = vec![vec![0.0; bank.dim()]; rows.len()];
    let mut loss = 0.0;
    for item in batch {
        loss += item.weight
            * ce_backward(
                &rows,
                item.embedding,
                item.label,
                temperature,
                item.weight,
                Some(&mut grad),
                None,
            );
    }
    Ok((loss, grad))
}

/// `num_known + argmax_k sim(background_k, q)`.
fn background_label(bank: &PrototypeBank, q: &[f64]) -> usize {
    let qn = norm(q);
    bank.num_known()
        + argmax(
            bank.background_weights()
                .iter()
                .map(|w| dot(w, q) / (norm(w) * qn)),
        )
}

/// Fine-tunes every row of `bank` with full-batch SGD on
/// `sum CE(support) + lambda * sum CE(background, pseudo-label)`.
pub fn finetune_bank(
    bank: &PrototypeBank,
    supports: &[(EmbeddingVector, usize)],
    backgrounds: &[EmbeddingVector],
    cfg: &FinetuneConfig,
) -> Result<(PrototypeBank, LossReport)> {
    cfg.validate()?;
    if bank.num_background() == 0 {
        return Err(Error::InvalidConfig(
            "fine-tuning needs at least one background row".into(),
        ));
    }
    if supports.is_empty() {
        return Err(Error::Empty("fine-tuning supports"));
    }
    if backgrounds.is_empty() {
        return Err(Error::Empty("fine-tuning backgrounds"));
    }

    let mut current = bank.clone();
    let mut pseudo: Vec<usize> = backgrounds
        .iter()
        .map(|b| background_label(&current, b.as_slice()))
        .collect();
    let mut totals = Vec::with_capacity(cfg.epochs + 1);
    let num_known = bank.num_known();

    for epoch in 0..=cfg.epochs {
        if cfg.reassign_each_epoch && epoch > 0 {
            for (label, b) in pseudo.iter_mut().zip(backgrounds) {
                *label = background_label(&current, b.as_slice());
            }
        }
        let batch: Vec<BatchItem<'_>> = supports
            .iter()
            .map(|(e, y)| BatchItem {
                embedding: e.as_slice(),
                label: *y,
                weight: 1.0,
            })
            .chain(backgrounds.iter().zip(&pseudo).map(|(e, y)| BatchItem {
                embedding: e.as_slice(),
                label: *y,
                weight: cfg.lambda_bkg,
            }))
            .collect();
        let (total, grad) = loss_and_grad(&current, &batch, cfg.temperature)?;
        totals.push(total);
        if epoch == cfg.epochs {
            break;
        }
        let rows = current
            .rows()
            .zip(grad)
            .enumerate()
            .map(|(j, (row, g))| {
                if cfg.freeze_known && j < num_known {
                    row.to_vec()
                } else {
                    row.iter()
                        .zip(g)
                        .map(|(w, gw)| w - cfg.learning_rate * gw)
                        .collect()
                }
            })
            .collect();
        current = current.replace_rows(rows)?;
    }

    let rows = bank_rows(&current);
    let loss_known: f64 = supports
        .iter()
        .map(|(e, y)| ce_backward(&rows, e.as_slice(), *y, cfg.temperature, 1.0, None, None))
        .sum();
    let loss_background: f64 = backgrounds
        .iter()
        .zip(&pseudo)
        .map(|(e, y)| ce_backward(&rows, e.as_slice(), *y, cfg.temperature, 1.0, None, None))
        .sum();
    let mut report = LossReport::new(loss_known, loss_background, cfg.lambda_bkg);
    report.per_epoch_totals = totals;
    Ok((current, report))
}

/// Open-set episodic loss: mean CE of known queries plus `lambda` times the
/// mean CE of unknown queries against their nearest background row.
pub fn episodic_loss(
    bank: &PrototypeBank,
    known_queries: &[(EmbeddingVector, usize)],
    unknown_queries: &[EmbeddingVector],
    lambda: f64,
    temperature: f64,
) -> Result<LossReport> {
    Ok(episodic_forward(bank, known_queries, unknown_queries, lambda, temperature)?.0)
}

fn episodic_forward(
    bank: &PrototypeBank,
    known_queries: &[(EmbeddingVector, usize)],
    unknown_queries: &[EmbeddingVector],
    lambda: f64,
    temperature: f64,
) -> Result<(LossReport, Vec<usize>)> {
    if known_queries.is_empty() {
        return Err(Error::Empty("known queries"));
    }
    if !unknown_queries.is_empty() && bank.num_background() == 0 {
        return Err(Error::InvalidConfig(
            "unknown queries need at least one background row".into(),
        ));
    }
    let rows = bank_rows(bank);
    let mut l1 = 0.0;
    for (q, y) in known_queries {
        check_label(bank, *y)?;
        check_norms(bank, q.as_slice())?;
        l1 += ce_backward(&rows, q.as_slice(), *y, temperature, 1.0, None, None);
    }
    l1 /= known_queries.len() as f64;
    let mut l2 = 0.0;
    let mut pseudo = Vec::with_capacity(unknown_queries.len());
    for q in unknown_queries {
        check_norms(bank, q.as_slice())?;
        let y = background_label(bank, q.as_slice());
        l2 += ce_backward(&rows, q.as_slice(), y, temperature, 1.0, None, None);
        pseudo.push(y);
    }
    if !unknown_queries.is_empty() {
        l2 /= unknown_queries.len() as f64;
    }
    Ok((LossReport::new(l1, l2, lambda), pseudo))
}

/// Learnable `d x d` map applied to raw embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAdapter {
    matrix: Vec<Vec<f64>>,
    enabled: bool,
}

impl LinearAdapter {
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            matrix,
            enabled: true,
        }
    }

    pub fn disabled(dim: usize) -> Self {
        Self {
            enabled: false,
            ..Self::identity(dim)
        }
    }

    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let d = matrix.len();
        if d == 0 {
            return Err(Error::Empty("adapter matrix"));
        }
        if matrix.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("adapter matrix must be square".into()));
        }
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter matrix"));
        }
        Ok(Self {
            matrix,
            enabled: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.iter().map(|row| dot(row, x)).collect()
    }

    /// `A x`; the identity when the adapter is disabled.
    pub fn apply(&self, x: &EmbeddingVector) -> Result<EmbeddingVector> {
        if x.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "embedding has dimension {}, adapter has {}",
                x.dim(),
                self.dim()
            )));
        }
        if !self.enabled {
            return Ok(x.clone());
        }
        EmbeddingVector::new(self.apply_slice(x.as_slice()))
    }
}

/// An episode of raw (un-adapted) embeddings for adapter training.
/// Background rows are fixed during adapter training.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEpisode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<(EmbeddingVector, usize)>,
    pub known_queries: Vec<(EmbeddingVector, usize)>,
    pub unknown_queries: Vec<EmbeddingVector>,
    pub background: Vec<Vec<f64>>,
}

fn adapt_all(
    adapter: &LinearAdapter,
    items: &[(EmbeddingVector, usize)],
) -> Result<Vec<(EmbeddingVector, usize)>> {
    items
        .iter()
        .map(|(e, y)| Ok((adapter.apply(e)?, *y)))
        .collect()
}

fn adapted_bank(adapter: &LinearAdapter, ep: &AdapterEpisode) -> Result<PrototypeBank> {
    let support = adapt_all(adapter, &ep.support)?;
    let bank = build_known_prototypes(&support, ep.n_way, ep.k_shot)?;
    bank.with_background(ep.background.clone())
}

/// Episodic loss of one episode after mapping every embedding through the
/// adapter and rebuilding prototypes from the adapted supports.
pub fn adapter_loss(
    adapter: &LinearAdapter,
    episode: &AdapterEpisode,
    lambda: f64,
    temperature: f64,
) -> Result<LossReport> {
    let bank = adapted_bank(adapter, episode)?;
    let known = adapt_all(adapter, &episode.known_queries)?;
    let unknown = episode
        .unknown_queries
        .iter()
        .map(|e| adapter.apply(e))
        .collect::<Result<Vec<_>>>()?;
    episodic_loss(&bank, &known, &unknown, lambda, temperature)
}

/// Analytic gradient of [`adapter_loss`] with respect to the adapter matrix.
/// Pseudo-labels of unknown queries are held at their current argmax.
pub fn adapter_gradient(
    adapter: &LinearAdapter,
    episode: &AdapterEpisode,
    lambda: f64,
    temperature: f64,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    if !adapter.enabled() {
        return Err(Error::InvalidConfig("adapter is disabled".into()));
    }
    let d = adapter.dim();
    let bank = adapted_bank(adapter, episode)?;
    let known = adapt_all(adapter, &episode.known_queries)?;
    let unknown = episode
        .unknown_queries
        .iter()
        .map(|e| adapter.apply(e))
        .collect::<Result<Vec<_>>>()?;
    let (report, pseudo) = episodic_forward(&bank, &known, &unknown, lambda, temperature)?;

    let rows = bank_rows(&bank);
    let mut grad_rows = vec![vec![0.0; d]; rows.len()];
    let mut grad = vec![vec![0.0; d]; d];
    let mut query_grad = vec![0.0; d];
    let accumulate = |grad: &mut Vec<Vec<f64>>, g: &[f64], x: &[f64]| {
        for (grow, gi) in grad.iter_mut().zip(g) {
            for (v, xj) in grow.iter_mut().zip(x) {
                *v += gi * xj;
            }
        }
    };

    let wk = 1.0 / known.len() as f64;
    for ((q, y), (raw, _)) in known.iter().zip(&episode.known_queries) {
        query_grad.iter_mut().for_each(|v| *v = 0.0);
        ce_backward(
            &rows,
            q.as_slice(),
            *y,
            temperature,
            wk,
            Some(&mut grad_rows),
            Some(&mut query_grad),
        );
        accumulate(&mut grad, &query_grad, raw.as_slice());
    }
    if !unknown.is_empty() {
        let wu = lambda / unknown.len() as f64;
        for ((q, y), raw) in unknown.iter().zip(&pseudo).zip(&episode.unknown_queries) {
            query_grad.iter_mut().for_each(|v| *v = 0.0);
            ce_backward(
                &rows,
                q.as_slice(),
                *y,
                temperature,
                wu,
                Some(&mut grad_rows),
                Some(&mut query_grad),
            );
            accumulate(&mut grad, &query_grad, raw.as_slice());
        }
    }

    // known row j is A m_j with m_j the raw support mean of class j
    let mut means = vec![vec![0.0; d]; episode.n_way];
    for (e, y) in &episode.support {
        for (m, v) in means[*y].iter_mut().zip(e.as_slice()) {
            *m += v;
        }
    }
    for (j, mean) in means.iter_mut().enumerate() {
        mean.iter_mut().for_each(|m| *m /= episode.k_shot as f64);
        accumulate(&mut grad, &grad_rows[j], mean);
    }
    Ok((report, grad))
}

/// `num_steps` SGD steps on the adapter matrix, cycling through `episodes`.
pub fn train_adapter(
    adapter: &LinearAdapter,
    episodes: &[AdapterEpisode],
    cfg: &FinetuneConfig,
    num_steps: usize,
) -> Result<LinearAdapter> {
    cfg.validate()?;
    if !adapter.enabled() {
        return Err(Error::InvalidConfig("adapter is disabled".into()));
    }
    if num_steps > 0 && episodes.is_empty() {
        return Err(Error::Empty("adapter episodes"));
    }
    let mut current = adapter.clone();
    for step in 0..num_steps {
        let ep = &episodes[step % episodes.len()];
        let (_, grad) = adapter_gradient(&current, ep, cfg.episodic_lambda(), cfg.temperature)?;
        for (row, g) in current.matrix.iter_mut().zip(grad) {
            for (a, ga) in row.iter_mut().zip(g) {
                *a -= cfg.learning_rate * ga;
            }
        }
        if current.matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter matrix"));
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Independent softmax/log evaluation straight from the definitions.
    fn oracle_ce(rows: &[Vec<f64>], q: &[f64], label: usize, t: f64) -> f64 {
        let cos = |w: &[f64]| {
            let d: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
            let nw: f64 = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            d / (nw * nq)
        };
        let z: Vec<f64> = rows.iter().map(|w| t * cos(w)).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        -(z[label].exp() / denom).ln()
    }

    #[test]
    fn symmetric_two_class_loss_is_ln2() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
        let l = ce_loss_cosine(&bank, &emb(&[1.0, 1.0]), 0, 7.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_loss_vanishes() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]).unwrap();
        let l = ce_loss_cosine(&bank, &emb(&[2.0, 0.0]), 0, 50.0).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 5)).collect();
        let bank = PrototypeBank::new(rows[..4].to_vec(), rows[4..].to_vec()).unwrap();
        let q = rand_vec(&mut rng, 5);
        for label in 0..6 {
            let l = ce_loss_cosine(&bank, &emb(&q), label, 3.0).unwrap();
            assert!((l - oracle_ce(&rows, &q, label, 3.0)).abs() < 1e-10);
        }
        assert!(ce_loss_cosine(&bank, &emb(&q), 6, 3.0).is_err());
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let bank = PrototypeBank::new(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let q = [3.0, 0.0, 0.0];
        let batch = [BatchItem {
            embedding: &q,
            label: 0,
            weight: 1.0,
        }];
        let g = grad_wrt_prototypes(&bank, &batch, 60.0).unwrap();
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn small_gradient_matches_finite_differences() {
        let rows = vec![vec![0.8, -0.3], vec![0.2, 0.9]];
        let bank = PrototypeBank::new(rows[..1].to_vec(), rows[1..].to_vec()).unwrap();
        let q = [0.5, 0.4];
        let batch = [BatchItem {
            embedding: &q,
            label: 1,
            weight: 1.0,
        }];
        let g = grad_wrt_prototypes(&bank, &batch, 10.0).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            for c in 0..2 {
                let mut plus = rows.clone();
                plus[j][c] += h;
                let mut minus = rows.clone();
                minus[j][c] -= h;
                let fd =
                    (oracle_ce(&plus, &q, 1, 10.0) - oracle_ce(&minus, &q, 1, 10.0)) / (2.0 * h);
                let rel = (g[j][c] - fd).abs() / (g[j][c].abs() + fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "row {j} col {c}: {} vs {fd}", g[j][c]);
            }
        }
    }

    #[test]
    fn gradient_rejects_bad_batches() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]).unwrap();
        assert!(grad_wrt_prototypes(&bank, &[], 1.0).is_err());
        let q = [1.0, 1.0];
        let neg = [BatchItem {
            embedding: &q,
            label: 0,
            weight: -1.0,
        }];
        assert!(grad_wrt_prototypes(&bank, &neg, 1.0).is_err());
        let zero = [0.0, 0.0];
        let z = [BatchItem {
            embedding: &zero,
            label: 0,
            weight: 1.0,
        }];
        assert!(matches!(
            grad_wrt_prototypes(&bank, &z, 1.0),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.2]], vec![vec![0.3, 0.1]]).unwrap();
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, report) =
            finetune_bank(&bank, &[(emb(&[1.0, 0.0]), 0)], &[emb(&[0.0, 1.0])], &cfg).unwrap();
        assert_eq!(out, bank);
        assert_eq!(report.per_epoch_totals.len(), 21);
        assert!(report
            .per_epoch_totals
            .iter()
            .all(|&t| t == report.per_epoch_totals[0]));
        assert!((report.total - report.per_epoch_totals[20]).abs() < 1e-12);
    }

    #[test]
    fn toy_finetune_descends() {
        let known = build_known_prototypes(&[(emb(&[1.0, 0.0]), 0)], 1, 1).unwrap();
        let bank = crate::classifier::init_background(
            &known,
            &crate::classifier::InitStrategy::Random { seed: 3 },
            1,
            &[],
        )
        .unwrap();
        let (_, report) = finetune_bank(
            &bank,
            &[(emb(&[1.0, 0.0]), 0)],
            &[emb(&[0.0, 1.0])],
            &FinetuneConfig::default(),
        )
        .unwrap();
        assert!(report.per_epoch_totals[20] < report.per_epoch_totals[0]);
    }

    #[test]
    fn finetune_needs_background_rows() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0]], vec![]).unwrap();
        let r = finetune_bank(
            &bank,
            &[(emb(&[1.0, 0.0]), 0)],
            &[emb(&[0.0, 1.0])],
            &FinetuneConfig::default(),
        );
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn freeze_known_keeps_known_rows() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.2]], vec![vec![0.3, 0.1]]).unwrap();
        let cfg = FinetuneConfig {
            freeze_known: true,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (out, _) =
            finetune_bank(&bank, &[(emb(&[1.0, 0.0]), 0)], &[emb(&[0.0, 1.0])], &cfg).unwrap();
        assert_eq!(out.known_weights(), bank.known_weights());
        assert_ne!(out.background_weights(), bank.background_weights());
    }

    #[test]
    fn episodic_loss_without_unknowns() {
        let bank = PrototypeBank::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![]).unwrap();
        let r = episodic_loss(&bank, &[(emb(&[1.0, 0.5]), 0)], &[], 0.05, 10.0).unwrap();
        assert_eq!(r.loss_background, 0.0);
        assert_eq!(r.total, r.loss_known);
    }

    #[test]
    fn unknown_query_matches_its_background_row() {
        let bank = PrototypeBank::new(
            vec![vec![1.0, 0.0, 0.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let u = emb(&[0.0, 0.0, 2.0]);
        let (r, pseudo) =
            episodic_forward(&bank, &[(emb(&[1.0, 0.0, 0.0]), 0)], &[u], 0.05, 60.0).unwrap();
        assert_eq!(pseudo, vec![2]);
        assert!(r.loss_background < 1e-20);
    }

    #[test]
    fn episodic_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 6)).collect();
        let bank = PrototypeBank::new(rows[..3].to_vec(), rows[3..].to_vec()).unwrap();
        let known: Vec<(Vec<f64>, usize)> =
            (0..4).map(|i| (rand_vec(&mut rng, 6), i % 3)).collect();
        let unknown: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 6)).collect();

        let l1 = known
            .iter()
            .map(|(q, y)| oracle_ce(&rows, q, *y, 4.0))
            .sum::<f64>()
            / 4.0;
        let l2 = unknown
            .iter()
            .map(|q| {
                let c = |w: &[f64]| {
                    w.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
                        / (w.iter().map(|a| a * a).sum::<f64>().sqrt()
                            * q.iter().map(|a| a * a).sum::<f64>().sqrt())
                };
                let y = if c(&rows[3]) >= c(&rows[4]) { 3 } else { 4 };
                oracle_ce(&rows, q, y, 4.0)
            })
            .sum::<f64>()
            / 3.0;

        let known_e: Vec<_> = known.iter().map(|(q, y)| (emb(q), *y)).collect();
        let unknown_e: Vec<_> = unknown.iter().map(|q| emb(q)).collect();
        let r = episodic_loss(&bank, &known_e, &unknown_e, 0.3, 4.0).unwrap();
        assert!((r.loss_known - l1).abs() < 1e-12);
        assert!((r.loss_background - l2).abs() < 1e-12);
        assert!((r.total - (l1 + 0.3 * l2)).abs() < 1e-12);
    }

    fn toy_adapter_episode(rng: &mut ChaCha8Rng, d: usize) -> AdapterEpisode {
        let support = (0..4).map(|i| (emb(&rand_vec(rng, d)), i % 2)).collect();
        let known_queries = (0..4).map(|i| (emb(&rand_vec(rng, d)), i % 2)).collect();
        let unknown_queries = (0..3).map(|_| emb(&rand_vec(rng, d))).collect();
        AdapterEpisode {
            n_way: 2,
            k_shot: 2,
            support,
            known_queries,
            unknown_queries,
            background: vec![rand_vec(rng, d), rand_vec(rng, d)],
        }
    }

    #[test]
    fn adapter_no_steps_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = toy_adapter_episode(&mut rng, 8);
        let a = LinearAdapter::identity(8);
        let cfg = FinetuneConfig::default();
        assert_eq!(
            train_adapter(&a, std::slice::from_ref(&ep), &cfg, 0).unwrap(),
            a
        );

        let still = train_adapter(
            &a,
            std::slice::from_ref(&ep),
            &FinetuneConfig {
                learning_rate: 0.0,
                ..cfg
            },
            3,
        )
        .unwrap();
        let raw_bank = build_known_prototypes(&ep.support, 2, 2)
            .unwrap()
            .with_background(ep.background.clone())
            .unwrap();
        let raw = episodic_loss(
            &raw_bank,
            &ep.known_queries,
            &ep.unknown_queries,
            0.05,
            10.0,
        )
        .unwrap();
        let adapted = adapter_loss(&still, &ep, 0.05, 10.0).unwrap();
        assert_eq!(raw, adapted);

        assert!(train_adapter(&LinearAdapter::disabled(8), &[ep], &cfg, 1).is_err());
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ep = toy_adapter_episode(&mut rng, 8);
        let mut m: Vec<Vec<f64>> = LinearAdapter::identity(8).matrix().to_vec();
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let a = LinearAdapter::from_matrix(m.clone()).unwrap();
        let (_, g) = adapter_gradient(&a, &ep, 0.5, 10.0).unwrap();
        let h = 1e-5;
        for i in 0..8 {
            for j in 0..8 {
                let mut p = m.clone();
                p[i][j] += h;
                let mut n = m.clone();
                n[i][j] -= h;
                let lp = adapter_loss(&LinearAdapter::from_matrix(p).unwrap(), &ep, 0.5, 10.0)
                    .unwrap()
                    .total;
                let ln = adapter_loss(&LinearAdapter::from_matrix(n).unwrap(), &ep, 0.5, 10.0)
                    .unwrap()
                    .total;
                let fd = (lp - ln) / (2.0 * h);
                let rel = (g[i][j] - fd).abs() / (g[i][j].abs() + fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "({i},{j}): {} vs {fd}", g[i][j]);
            }
        }
    }
}
