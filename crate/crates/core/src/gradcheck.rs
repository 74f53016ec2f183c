//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, cosine, PrototypeBank};
use crate::error::{Error, Result};
use crate::featmap::EmbeddingVector;
use crate::finetune::{
    adapter_gradient, adapter_loss, ce_loss_cosine, grad_wrt_prototypes, AdapterEpisode, BatchItem,
    LinearAdapter,
};

/// Pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(h) - f(-h)) / 2h`.
    TwoPoint,
    /// `(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`.
    #[default]
    FivePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances drawn for every prototype setting and for the adapter.
    pub instances: usize,
    pub step: f64,
    pub stencil: Stencil,
    pub temperature: f64,
    pub lambda: f64,
    pub num_known: usize,
    pub dims: Vec<usize>,
    pub num_background: Vec<usize>,
    pub adapter_dim: usize,
    /// Added to the first analytic coordinate of every case. Nonzero values
    /// give a negative control.
    pub perturb: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            step: 1e-3,
            stencil: Stencil::FivePoint,
            temperature: 10.0,
            lambda: 0.05,
            num_known: 5,
            dims: vec![8, 64],
            num_background: vec![1, 2, 5],
            adapter_dim: 8,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub component: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn central_difference(f: impl Fn(f64) -> Result<f64>, h: f64, stencil: Stencil) -> Result<f64> {
    match stencil {
        Stencil::TwoPoint => Ok((f(h)? - f(-h)?) / (2.0 * h)),
        Stencil::FivePoint => {
            Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn batch_loss(bank: &PrototypeBank, items: &[(Vec<f64>, usize, f64)], t: f64) -> Result<f64> {
    let mut total = 0.0;
    for (e, y, w) in items {
        total += w * ce_loss_cosine(bank, &EmbeddingVector::new(e.clone())?, *y, t)?;
    }
    Ok(total)
}

fn check_prototypes(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    d: usize,
    nb: usize,
) -> Result<GradcheckCase> {
    let nk = cfg.num_known;
    let known: Vec<Vec<f64>> = (0..nk).map(|_| gaussian(rng, d)).collect();
    let background: Vec<Vec<f64>> = (0..nb).map(|_| gaussian(rng, d)).collect();
    let bank = PrototypeBank::new(known, background)?;

    // two supports per class and three background items with their
    // pseudo-labels held fixed
    let mut items = Vec::new();
    for c in 0..nk {
        for _ in 0..2 {
            items.push((gaussian(rng, d), c, 1.0));
        }
    }
    for _ in 0..3 {
        let e = gaussian(rng, d);
        let label = nk + argmax(bank.background_weights().iter().map(|w| cosine(w, &e)));
        items.push((e, label, cfg.lambda));
    }
    let batch: Vec<BatchItem<'_>> = items
        .iter()
        .map(|(e, y, w)| BatchItem {
            embedding: e,
            label: *y,
            weight: *w,
        })
        .collect();
    let mut analytic = grad_wrt_prototypes(&bank, &batch, cfg.temperature)?;
    analytic[0][0] += cfg.perturb;

    let rows: Vec<Vec<f64>> = bank.rows().map(<[f64]>::to_vec).collect();
    let mut worst: f64 = 0.0;
    for j in 0..rows.len() {
        for i in 0..d {
            let eval = |delta: f64| -> Result<f64> {
                let mut r = rows.clone();
                r[j][i] += delta;
                let bg = r.split_off(nk);
                batch_loss(&PrototypeBank::new(r, bg)?, &items, cfg.temperature)
            };
            let numeric = central_difference(eval, cfg.step, cfg.stencil)?;
            worst = worst.max(relative_error(analytic[j][i], numeric));
        }
    }
    Ok(GradcheckCase {
        component: format!("prototypes d={d} n_bkg={nb}"),
        coordinates: rows.len() * d,
        max_rel_error: worst,
    })
}

fn check_adapter(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckCase> {
    let d = cfg.adapter_dim;
    let (n_way, k_shot) = (3, 2);
    let emb = |rng: &mut ChaCha8Rng| EmbeddingVector::new(gaussian(rng, d));
    let mut support = Vec::new();
    let mut known_queries = Vec::new();
    for c in 0..n_way {
        for _ in 0..k_shot {
            support.push((emb(rng)?, c));
        }
        for _ in 0..2 {
            known_queries.push((emb(rng)?, c));
        }
    }
    let unknown_queries = (0..3).map(|_| emb(rng)).collect::<Result<Vec<_>>>()?;
    let episode = AdapterEpisode {
        n_way,
        k_shot,
        support,
        known_queries,
        unknown_queries,
        background: (0..2).map(|_| gaussian(rng, d)).collect(),
    };
    let matrix: Vec<Vec<f64>> = (0..d)
        .map(|r| {
            (0..d)
                .map(|c| f64::from(u8::from(r == c)) + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let adapter = LinearAdapter::from_matrix(matrix.clone())?;
    let (_, mut analytic) = adapter_gradient(&adapter, &episode, cfg.lambda, cfg.temperature)?;
    analytic[0][0] += cfg.perturb;

    let mut worst: f64 = 0.0;
    for r in 0..d {
        for c in 0..d {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = matrix.clone();
                m[r][c] += delta;
                let a = LinearAdapter::from_matrix(m)?;
                Ok(adapter_loss(&a, &episode, cfg.lambda, cfg.temperature)?.total)
            };
            let numeric = central_difference(eval, cfg.step, cfg.stencil)?;
            worst = worst.max(relative_error(analytic[r][c], numeric));
        }
    }
    Ok(GradcheckCase {
        component: format!("adapter d={d}"),
        coordinates: d * d,
        max_rel_error: worst,
    })
}

/// Runs `instances` prototype cases for each dimension against each
/// background count, then `instances` adapter cases.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.step.is_nan()
        || cfg.step <= 0.0
        || cfg.num_known == 0
        || cfg.adapter_dim == 0
        || cfg.instances == 0
    {
        return Err(Error::InvalidConfig(
            "gradcheck needs step > 0 and positive num_known, adapter_dim, instances".into(),
        ));
    }
    if cfg.dims.contains(&0) || cfg.num_background.contains(&0) {
        return Err(Error::InvalidConfig(
            "dimensions and background counts must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    for &d in &cfg.dims {
        for &nb in &cfg.num_background {
            for _ in 0..cfg.instances {
                cases.push(check_prototypes(cfg, &mut rng, d, nb)?);
            }
        }
    }
    for _ in 0..cfg.instances {
        cases.push(check_adapter(cfg, &mut rng)?);
    }
    Ok(GradcheckReport { cases })
}
