//! On-disk formats: the FSOF feature dataset, its JSON sidecars, and 8-bit
//! grayscale heatmaps.
//!
//! FSOF layout, little-endian throughout:
//!
//! ```text
//! magic    b"FSOF"
//! version  u16
//! count    u32
//! count x { label u32, H u16, W u16, d u16, H*W*d f32 in (h, w, c) order }
//! ```
//!
//! Class names live in `<path>.json`; synthetic ground-truth masks in
//! `<path>.masks.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::FeatureDataset;
use crate::error::{Error, Result};
use crate::featmap::{ActivationMap, FeatureMap};

pub const MAGIC: [u8; 4] = *b"FSOF";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4;

/// Bytes taken by one item record.
pub fn record_bytes(height: usize, width: usize, channels: usize) -> usize {
    4 + 2 + 2 + 2 + 4 * height * width * channels
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn mask_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".masks.json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassSidecar {
    format_version: u16,
    class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    format_version: u16,
    height: usize,
    width: usize,
    /// One row-major 0/1 vector per item.
    masks: Vec<Vec<u8>>,
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::InvalidDataset(format!("{what} {v} does not fit in u16")))
}

pub fn encode_dataset(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let (h, w, d) = ds.shape();
    let count = u32::try_from(ds.len())
        .map_err(|_| Error::InvalidDataset("more than u32::MAX items".into()))?;
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * record_bytes(h, w, d));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (f, label) in ds.items() {
        let label = u32::try_from(*label)
            .map_err(|_| Error::InvalidDataset(format!("label {label} does not fit in u32")))?;
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&to_u16(f.height(), "height")?.to_le_bytes());
        out.extend_from_slice(&to_u16(f.width(), "width")?.to_le_bytes());
        out.extend_from_slice(&to_u16(f.channels(), "channels")?.to_le_bytes());
        for &v in f.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes an FSOF payload. `class_names`, when given, must cover every
/// label.
pub fn decode_dataset(bytes: &[u8], class_names: Option<Vec<String>>) -> Result<FeatureDataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.u32("item count")? as usize;
    let mut items = Vec::with_capacity(count.min(bytes.len() / record_bytes(1, 1, 1)));
    for item in 0..count {
        let label = r.u32("label")? as usize;
        let h = r.u16("height")? as usize;
        let w = r.u16("width")? as usize;
        let d = r.u16("channels")? as usize;
        let payload = r.take(4 * h * w * d, "item payload")?;
        let mut values = Vec::with_capacity(h * w * d);
        for (offset, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { item, offset });
            }
            values.push(v as f64);
        }
        items.push((FeatureMap::new(h, w, d, values)?, label));
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidDataset(format!(
            "{} trailing bytes after {count} items",
            bytes.len() - r.pos
        )));
    }
    match class_names {
        Some(names) => FeatureDataset::with_names(items, names),
        None => FeatureDataset::new(items),
    }
}

/// Writes the dataset and its class-name sidecar.
pub fn write_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = ClassSidecar {
        format_version: FORMAT_VERSION,
        class_names: ds.class_names().to_vec(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(side, e))
}

/// Reads a dataset; the class-name sidecar is optional.
pub fn read_dataset(path: &Path) -> Result<FeatureDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let names = if side.exists() {
        let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: ClassSidecar = serde_json::from_slice(&raw)?;
        Some(sidecar.class_names)
    } else {
        None
    };
    decode_dataset(&bytes, names)
}

pub fn write_masks(masks: &[ActivationMap], path: &Path) -> Result<()> {
    let first = masks.first().ok_or(Error::Empty("masks"))?;
    let sidecar = MaskSidecar {
        format_version: FORMAT_VERSION,
        height: first.height(),
        width: first.width(),
        masks: masks
            .iter()
            .map(|m| m.values().iter().map(|&v| u8::from(v >= 0.5)).collect())
            .collect(),
    };
    let side = mask_sidecar_path(path);
    fs::write(&side, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(side, e))
}

/// Reads the ground-truth masks written next to a synthetic dataset.
pub fn read_masks(path: &Path) -> Result<Vec<ActivationMap>> {
    let side = mask_sidecar_path(path);
    let raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: MaskSidecar = serde_json::from_slice(&raw)?;
    sidecar
        .masks
        .into_iter()
        .map(|m| {
            ActivationMap::new(
                sidecar.height,
                sidecar.width,
                m.into_iter().map(f64::from).collect(),
            )
        })
        .collect()
}

/// Binary PGM (`P5`) bytes: pixel = `round(value * 255)`.
pub fn encode_heatmap(m: &ActivationMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    for (index, &value) in m.values().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::HeatmapRange { value, index });
        }
        out.push((value * 255.0 + 0.5).floor() as u8);
    }
    Ok(out)
}

pub fn export_heatmap(m: &ActivationMap, path: &Path) -> Result<()> {
    let bytes = encode_heatmap(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
