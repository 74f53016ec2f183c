//! Class activation maps and progressive CAM background mining.
//!
//! A single CAM tends to light up only the most discriminative part of the
//! object. Progressive CAM repeatedly suppresses the region found so far and
//! recomputes the CAM on what remains; the normalized maps are summed and
//! renormalized into one foreground mask. Multiplying the original map by
//! `1 - mask` leaves a background feature map whose pooled embedding serves
//! as a pseudo-unknown training example.

use serde::{Deserialize, Serialize};

use crate::classifier::PrototypeBank;
use crate::error::{Error, Result};
use crate::featmap::{
    mask_apply, minmax_norm, softmax_mask, spatial_avg_pool, ActivationMap, EmbeddingVector,
    FeatureMap,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    MinMax,
    /// Peak-rescaled spatial softmax per iteration. The final aggregate is
    /// still min-max normalized.
    SpatialSoftmax,
}

impl NormKind {
    pub fn apply(self, m: &ActivationMap) -> ActivationMap {
        match self {
            NormKind::MinMax => minmax_norm(m),
            NormKind::SpatialSoftmax => softmax_mask(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProCamConfig {
    /// Number of CAM iterations, at least one.
    pub tau: usize,
    pub norm_kind: NormKind,
    pub include_trace: bool,
}

impl Default for ProCamConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            norm_kind: NormKind::MinMax,
            include_trace: false,
        }
    }
}

impl ProCamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::InvalidConfig("tau must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProCamResult {
    pub final_mask: ActivationMap,
    pub background_map: FeatureMap,
    /// The `tau` normalized per-iteration maps, when requested.
    pub per_iteration_masks: Option<Vec<ActivationMap>>,
}

/// Per-location weighted channel sum `sum_c w[c] * f[a, b, c]`.
pub fn cam(f: &FeatureMap, w: &[f64]) -> Result<ActivationMap> {
    if w.len() != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "class weight has dimension {}, feature map has {} channels",
            w.len(),
            f.channels()
        )));
    }
    let values = (0..f.cells())
        .map(|cell| f.cell(cell).iter().zip(w).map(|(x, y)| x * y).sum())
        .collect();
    ActivationMap::new(f.height(), f.width(), values)
}

pub fn procam(f: &FeatureMap, w: &[f64], cfg: &ProCamConfig) -> Result<ProCamResult> {
    cfg.validate()?;
    let mut working = f.clone();
    let mut total = ActivationMap::filled(f.height(), f.width(), 0.0)?;
    let mut trace = cfg.include_trace.then(|| Vec::with_capacity(cfg.tau));
    for _ in 0..cfg.tau {
        let normalized = cfg.norm_kind.apply(&cam(&working, w)?);
        working = mask_apply(&working, &normalized)?;
        total = total.add(&normalized)?;
        if let Some(t) = trace.as_mut() {
            t.push(normalized);
        }
    }
    let final_mask = minmax_norm(&total);
    let background_map = mask_apply(f, &final_mask)?;
    Ok(ProCamResult {
        final_mask,
        background_map,
        per_iteration_masks: trace,
    })
}

pub fn background_embedding(result: &ProCamResult) -> EmbeddingVector {
    spatial_avg_pool(&result.background_map)
}

/// Pooled foreground and background embeddings of one support item.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEmbeddings {
    pub foreground: EmbeddingVector,
    pub background: EmbeddingVector,
}

/// Runs [`procam`] on every support map using its own class prototype.
/// Output order follows input order.
pub fn procam_for_support(
    supports: &[(FeatureMap, usize)],
    bank: &PrototypeBank,
    cfg: &ProCamConfig,
) -> Result<Vec<SupportEmbeddings>> {
    supports
        .iter()
        .map(|(f, class)| {
            let w = bank
                .known_weights()
                .get(*class)
                .ok_or(Error::MissingPrototype(*class))?;
            let result = procam(f, w, cfg)?;
            Ok(SupportEmbeddings {
                foreground: spatial_avg_pool(f),
                background: background_embedding(&result),
            })
        })
        .collect()
}
