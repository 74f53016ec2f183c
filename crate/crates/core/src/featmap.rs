//! Feature maps, activation maps and the pooling / normalization primitives
//! shared by the rest of the crate.
//!
//! A [`FeatureMap`] is the `H x W x d` activation grid of one image taken from
//! the last convolutional layer, stored row-major as `(h, w, channel)`. An
//! [`ActivationMap`] is a single `H x W` scalar field (a CAM, a mask, or an
//! aggregate of masks).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranges narrower than this are treated as constant by [`minmax_norm`].
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial cells, `H * W`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.values[(a * self.width + b) * self.channels + c]
    }

    /// Channel vector at flat spatial index `cell = a * W + b`.
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.channels..(cell + 1) * self.channels]
    }

    /// `alpha * self`, used by scale-invariance checks.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.values.iter().map(|v| v * alpha).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "activation map dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} activation map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation map"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.width + b]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of two maps of equal shape.
    pub fn add(&self, other: &ActivationMap) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {}x{} map to {}x{} map",
                other.height, other.width, self.height, self.width
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// A pooled embedding `Φ(x)` of length `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Per-channel mean over all spatial cells.
pub fn spatial_avg_pool(f: &FeatureMap) -> EmbeddingVector {
    let mut acc = vec![0.0; f.channels];
    for cell in 0..f.cells() {
        for (a, v) in acc.iter_mut().zip(f.cell(cell)) {
            *a += v;
        }
    }
    let n = f.cells() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    EmbeddingVector(acc)
}

/// Affine rescale to `[0, 1]`. A map whose range is below [`EPS_NORM`] maps
/// to all zeros, so masking with it is a no-op.
pub fn minmax_norm(m: &ActivationMap) -> ActivationMap {
    let lo = m.min();
    let range = m.max() - lo;
    if range < EPS_NORM {
        return m.map(|_| 0.0);
    }
    m.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Softmax over all spatial locations; the output sums to one.
pub fn spatial_softmax(m: &ActivationMap) -> ActivationMap {
    let peak = m.max();
    let exps = m.map(|v| (v - peak).exp());
    let total: f64 = exps.values.iter().sum();
    exps.map(|v| v / total)
}

/// [`spatial_softmax`] divided by its maximum so the peak cell equals one.
/// This is the form used as a per-iteration mask.
pub fn softmax_mask(m: &ActivationMap) -> ActivationMap {
    let soft = spatial_softmax(m);
    let peak = soft.max();
    soft.map(|v| v / peak)
}

/// `f[a, b, c] * (1 - m[a, b])` for every channel.
pub fn mask_apply(f: &FeatureMap, m: &ActivationMap) -> Result<FeatureMap> {
    if f.height != m.height || f.width != m.width {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, feature map is {}x{}",
            m.height, m.width, f.height, f.width
        )));
    }
    let d = f.channels;
    let values = f
        .values
        .chunks_exact(d)
        .zip(&m.values)
        .flat_map(|(cell, &mv)| cell.iter().map(move |v| v * (1.0 - mv)))
        .collect();
    Ok(FeatureMap {
        height: f.height,
        width: f.width,
        channels: d,
        values,
    })
}
