//! Labeled feature datasets, episodic task sampling and a synthetic
//! feature-map generator with ground-truth foreground masks.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featmap::{ActivationMap, FeatureMap};

/// SplitMix64 finalizer over `master + counter * golden`; gives independent
/// per-episode seeds from one master seed.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    let mut z = master.wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Feature maps with dense class labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    items: Vec<(FeatureMap, usize)>,
    class_index: Vec<Vec<usize>>,
    class_names: Vec<String>,
    height: usize,
    width: usize,
    channels: usize,
}

impl FeatureDataset {
    pub fn new(items: Vec<(FeatureMap, usize)>) -> Result<Self> {
        let num_classes = items.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
        let names = (0..num_classes).map(|i| format!("class_{i}")).collect();
        Self::with_names(items, names)
    }

    pub fn with_names(items: Vec<(FeatureMap, usize)>, class_names: Vec<String>) -> Result<Self> {
        let (first, _) = items.first().ok_or(Error::Empty("dataset"))?;
        let (height, width, channels) = (first.height(), first.width(), first.channels());
        let mut class_index: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
        for (i, (f, label)) in items.iter().enumerate() {
            if (f.height(), f.width(), f.channels()) != (height, width, channels) {
                return Err(Error::InvalidDataset(format!(
                    "item {i} is {}x{}x{}, dataset is {height}x{width}x{channels}",
                    f.height(),
                    f.width(),
                    f.channels()
                )));
            }
            class_index
                .get_mut(*label)
                .ok_or_else(|| {
                    Error::InvalidDataset(format!(
                        "item {i} has label {label} but only {} class names",
                        class_names.len()
                    ))
                })?
                .push(i);
        }
        if let Some(empty) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::InvalidDataset(format!(
                "labels are not dense: class {empty} has no items"
            )));
        }
        Ok(Self {
            items,
            class_index,
            class_names,
            height,
            width,
            channels,
        })
    }

    pub fn items(&self) -> &[(FeatureMap, usize)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_items(&self, label: usize) -> &[usize] {
        &self.class_index[label]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// `(H, W, d)` shared by every item.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Known queries per closed class.
    pub n_query: usize,
    pub n_open_classes: usize,
    /// Unknown queries per open class.
    pub n_open_query: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            n_query: 15,
            n_open_classes: 5,
            n_open_query: 15,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 || self.n_open_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "episode needs n_way >= 2 and positive k_shot, n_query, n_open_classes; got {}/{}/{}/{}",
                self.n_way, self.k_shot, self.n_query, self.n_open_classes
            )));
        }
        if self.n_open_query == 0 {
            return Err(Error::InvalidConfig("n_open_query must be positive".into()));
        }
        Ok(())
    }

    /// Checks that `ds` can supply any episode drawn with this spec.
    pub fn check_dataset(&self, ds: &FeatureDataset) -> Result<()> {
        self.validate()?;
        let required = self.n_way + self.n_open_classes;
        if ds.num_classes() < required {
            return Err(Error::InsufficientClasses {
                available: ds.num_classes(),
                required,
            });
        }
        let per_class = (self.k_shot + self.n_query).max(self.n_open_query);
        for label in 0..ds.num_classes() {
            let available = ds.class_items(label).len();
            if available < per_class {
                return Err(Error::InsufficientItems {
                    label,
                    available,
                    required: per_class,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `N * K` maps labelled with episode classes `0..N`, class-major.
    pub support: Vec<(FeatureMap, usize)>,
    pub known_queries: Vec<(FeatureMap, usize)>,
    pub unknown_queries: Vec<FeatureMap>,
    /// Episode class -> dataset label.
    pub class_mapping: Vec<usize>,
    pub open_classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub known_query_indices: Vec<usize>,
    pub unknown_query_indices: Vec<usize>,
}

/// Draws closed and open classes without replacement, then disjoint support
/// and query items inside each class. Pure in `(ds, spec)`.
pub fn sample_episode(ds: &FeatureDataset, spec: &EpisodeSpec) -> Result<Episode> {
    spec.check_dataset(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes =
        index::sample(&mut rng, ds.num_classes(), spec.n_way + spec.n_open_classes).into_vec();
    let (closed, open) = classes.split_at(spec.n_way);

    let mut ep = Episode {
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        known_queries: Vec::with_capacity(spec.n_way * spec.n_query),
        unknown_queries: Vec::with_capacity(spec.n_open_classes * spec.n_open_query),
        class_mapping: closed.to_vec(),
        open_classes: open.to_vec(),
        support_indices: Vec::new(),
        known_query_indices: Vec::new(),
        unknown_query_indices: Vec::new(),
    };
    for (episode_class, &label) in closed.iter().enumerate() {
        let members = ds.class_items(label);
        let picks = index::sample(&mut rng, members.len(), spec.k_shot + spec.n_query);
        for (n, pick) in picks.iter().enumerate() {
            let item = members[pick];
            let f = ds.items[item].0.clone();
            if n < spec.k_shot {
                ep.support.push((f, episode_class));
                ep.support_indices.push(item);
            } else {
                ep.known_queries.push((f, episode_class));
                ep.known_query_indices.push(item);
            }
        }
    }
    for &label in open {
        let members = ds.class_items(label);
        for pick in index::sample(&mut rng, members.len(), spec.n_open_query) {
            let item = members[pick];
            ep.unknown_queries.push(ds.items[item].0.clone());
            ep.unknown_query_indices.push(item);
        }
    }
    Ok(ep)
}

/// Half-open rectangle `[top, top + rows) x [left, left + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn contains(&self, a: usize, b: usize) -> bool {
        a >= self.top && a < self.top + self.rows && b >= self.left && b < self.left + self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub items_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Ground-truth foreground rectangle of each class.
    pub fg_regions: Vec<Region>,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// Standard deviation of one Gaussian offset vector per item, added to
    /// every cell of that item.
    #[serde(default)]
    pub item_noise_sigma: f64,
    /// Noise of both kinds is confined to channels `0..n`. `None` means all.
    #[serde(default)]
    pub noisy_channels: Option<usize>,
    /// Channel pattern written into every cell outside the foreground. Must be
    /// zero on the class channels `0..num_classes`.
    pub bkg_signature: Vec<f64>,
    /// Signal intensity at the corners of a foreground rectangle relative to
    /// its centre. `1.0` is flat.
    pub edge_intensity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::new(5, 20, 8, 8, 16, 0)
    }
}

impl SyntheticConfig {
    /// Square foreground patches of half the grid side placed on a coarse
    /// lattice, a background signature on channel `num_classes`,
    /// `signal_strength = 1`, `noise_sigma = 0.1`.
    pub fn new(
        num_classes: usize,
        items_per_class: usize,
        height: usize,
        width: usize,
        channels: usize,
        seed: u64,
    ) -> Self {
        let rows = (height / 2).max(1);
        let cols = (width / 2).max(1);
        let tops = lattice(height - rows);
        let lefts = lattice(width - cols);
        let fg_regions = (0..num_classes)
            .map(|c| Region {
                top: tops[c % tops.len()],
                left: lefts[(c / tops.len()) % lefts.len()],
                rows,
                cols,
            })
            .collect();
        let mut bkg_signature = vec![0.0; channels];
        if let Some(slot) = bkg_signature.get_mut(num_classes) {
            *slot = 0.5;
        }
        Self {
            num_classes,
            items_per_class,
            height,
            width,
            channels,
            fg_regions,
            signal_strength: 1.0,
            noise_sigma: 0.1,
            item_noise_sigma: 0.0,
            noisy_channels: None,
            bkg_signature,
            edge_intensity: 1.0,
            seed,
        }
    }

    /// The desk-scale open-set benchmark: 20 classes so that 5-way episodes
    /// with 5 open classes can be drawn, 4x4 peaked foregrounds on a 16x16
    /// grid, a strong shared background and 256 channels of which only the
    /// 21 signal channels carry noise.
    pub fn benchmark(seed: u64) -> Self {
        let mut cfg = Self::new(20, 20, 16, 16, 256, seed);
        let tops = lattice(12);
        cfg.fg_regions = (0..20)
            .map(|c| Region {
                top: tops[c % 3],
                left: tops[(c / 3) % 3],
                rows: 4,
                cols: 4,
            })
            .collect();
        cfg.signal_strength = 22.0;
        cfg.noise_sigma = 0.3;
        cfg.item_noise_sigma = 0.3;
        cfg.noisy_channels = Some(21);
        cfg.edge_intensity = 0.5;
        let mut bkg = vec![0.0; cfg.channels];
        bkg[20] = 1.5;
        cfg.bkg_signature = bkg;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.items_per_class == 0 {
            return Err(Error::InvalidConfig(
                "num_classes and items_per_class must be positive".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(
                "grid dimensions must be positive".into(),
            ));
        }
        if self.channels < self.num_classes + 1 {
            return Err(Error::InvalidConfig(format!(
                "{} channels cannot hold {} orthogonal class signatures plus background",
                self.channels, self.num_classes
            )));
        }
        if self.fg_regions.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} foreground regions for {} classes",
                self.fg_regions.len(),
                self.num_classes
            )));
        }
        for (c, r) in self.fg_regions.iter().enumerate() {
            if r.rows == 0
                || r.cols == 0
                || r.top + r.rows > self.height
                || r.left + r.cols > self.width
            {
                return Err(Error::InvalidConfig(format!(
                    "foreground region of class {c} lies outside the {}x{} grid",
                    self.height, self.width
                )));
            }
        }
        if self.bkg_signature.len() != self.channels {
            return Err(Error::InvalidConfig(format!(
                "background signature has {} channels, expected {}",
                self.bkg_signature.len(),
                self.channels
            )));
        }
        if self.bkg_signature[..self.num_classes]
            .iter()
            .any(|&v| v != 0.0)
        {
            return Err(Error::InvalidConfig(
                "background signature overlaps class channels".into(),
            ));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.signal_strength)
            || !finite_nonneg(self.noise_sigma)
            || !finite_nonneg(self.item_noise_sigma)
            || !(0.0..=1.0).contains(&self.edge_intensity)
            || self.bkg_signature.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "signal_strength and noise_sigma must be non-negative, edge_intensity in [0, 1]"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Foreground intensity profile at `(a, b)` inside region `r`: 1 at the
    /// centre falling linearly with Euclidean distance to `edge_intensity`
    /// at the corners.
    fn profile(&self, r: &Region, a: usize, b: usize) -> f64 {
        let ha = (r.rows as f64 - 1.0) / 2.0;
        let hb = (r.cols as f64 - 1.0) / 2.0;
        let reach = ha.hypot(hb);
        if reach == 0.0 {
            return 1.0;
        }
        let t = (a as f64 - r.top as f64 - ha).hypot(b as f64 - r.left as f64 - hb) / reach;
        1.0 - (1.0 - self.edge_intensity) * t
    }
}

fn lattice(span: usize) -> Vec<usize> {
    let mut v = vec![0, span / 2, span];
    v.dedup();
    v
}

/// Synthetic dataset plus one binary ground-truth foreground mask per item.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: FeatureDataset,
    pub masks: Vec<ActivationMap>,
}

/// Items are `class signature * profile` inside the class region, the shared
/// background signature outside it, plus i.i.d. Gaussian noise everywhere.
/// Class `c` owns channel `c`. Values are rounded to `f32` so the dataset is
/// unchanged by a trip through the on-disk format.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (h, w, d) = (cfg.height, cfg.width, cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let item_noise = Normal::new(0.0, cfg.item_noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("item_noise_sigma: {e}")))?;

    let masks_by_class: Vec<ActivationMap> = cfg
        .fg_regions
        .iter()
        .map(|r| {
            let cells = (0..h * w)
                .map(|i| if r.contains(i / w, i % w) { 1.0 } else { 0.0 })
                .collect();
            ActivationMap::new(h, w, cells)
        })
        .collect::<Result<_>>()?;

    let noisy = cfg.noisy_channels.unwrap_or(d).min(d);
    let mut items = Vec::with_capacity(cfg.num_classes * cfg.items_per_class);
    let mut masks = Vec::with_capacity(items.capacity());
    for class in 0..cfg.num_classes {
        let region = &cfg.fg_regions[class];
        for _ in 0..cfg.items_per_class {
            let offset: Vec<f64> = (0..noisy).map(|_| item_noise.sample(&mut rng)).collect();
            let mut values = Vec::with_capacity(h * w * d);
            for a in 0..h {
                for b in 0..w {
                    let inside = region.contains(a, b);
                    let gain = if inside {
                        cfg.signal_strength * cfg.profile(region, a, b)
                    } else {
                        0.0
                    };
                    for c in 0..d {
                        let base = if inside {
                            if c == class {
                                gain
                            } else {
                                0.0
                            }
                        } else {
                            cfg.bkg_signature[c]
                        };
                        let v = if c < noisy {
                            base + offset[c] + noise.sample(&mut rng)
                        } else {
                            base
                        };
                        values.push(v as f32 as f64);
                    }
                }
            }
            items.push((FeatureMap::new(h, w, d, values)?, class));
            masks.push(masks_by_class[class].clone());
        }
    }
    let names = (0..cfg.num_classes)
        .map(|c| format!("synthetic_{c}"))
        .collect();
    Ok(SyntheticDataset {
        dataset: FeatureDataset::with_names(items, names)?,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_dataset(classes: usize, per_class: usize) -> FeatureDataset {
        let mut cfg = SyntheticConfig::new(classes, per_class, 2, 2, classes + 1, 1);
        cfg.noise_sigma = 0.5;
        generate_synthetic(&cfg).unwrap().dataset
    }

    #[test]
    fn dataset_validation() {
        let f = FeatureMap::zeros(2, 2, 3).unwrap();
        let g = FeatureMap::zeros(2, 3, 3).unwrap();
        assert!(FeatureDataset::new(vec![(f.clone(), 0), (g, 1)]).is_err());
        assert!(FeatureDataset::new(vec![(f.clone(), 0), (f.clone(), 2)]).is_err());
        assert!(FeatureDataset::new(vec![]).is_err());
        let ds = FeatureDataset::new(vec![(f.clone(), 1), (f, 0)]).unwrap();
        assert_eq!(ds.class_items(1), &[0]);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn forced_selection_uses_every_class() {
        let ds = tiny_dataset(4, 3);
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 1,
            n_query: 2,
            n_open_classes: 2,
            n_open_query: 3,
            seed: 9,
        };
        let ep = sample_episode(&ds, &spec).unwrap();
        let mut used: Vec<usize> = ep
            .class_mapping
            .iter()
            .chain(&ep.open_classes)
            .copied()
            .collect();
        used.sort();
        assert_eq!(used, vec![0, 1, 2, 3]);
        let all: HashSet<usize> = ep
            .support_indices
            .iter()
            .chain(&ep.known_query_indices)
            .chain(&ep.unknown_query_indices)
            .copied()
            .collect();
        assert_eq!(all.len(), 12);
        assert_eq!(sample_episode(&ds, &spec).unwrap(), ep);
    }

    #[test]
    fn episode_structure() {
        let ds = tiny_dataset(12, 25);
        let spec = EpisodeSpec {
            seed: 3,
            ..EpisodeSpec::default()
        };
        let ep = sample_episode(&ds, &spec).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.known_queries.len(), 75);
        assert_eq!(ep.unknown_queries.len(), 75);
        for (i, (_, c)) in ep.support.iter().enumerate() {
            assert_eq!(*c, i / 5);
            assert_eq!(ds.items()[ep.support_indices[i]].1, ep.class_mapping[*c]);
        }
        for &u in &ep.unknown_query_indices {
            assert!(!ep.class_mapping.contains(&ds.items()[u].1));
        }
        let other = sample_episode(&ds, &EpisodeSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(other.support_indices, ep.support_indices);
    }

    #[test]
    fn shortfalls_are_named() {
        let ds = tiny_dataset(6, 3);
        let spec = EpisodeSpec::default();
        assert!(matches!(
            sample_episode(&ds, &spec),
            Err(Error::InsufficientClasses {
                available: 6,
                required: 10
            })
        ));
        let spec = EpisodeSpec {
            n_way: 2,
            n_open_classes: 2,
            k_shot: 2,
            n_query: 2,
            n_open_query: 1,
            seed: 0,
        };
        assert!(matches!(
            sample_episode(&ds, &spec),
            Err(Error::InsufficientItems {
                available: 3,
                required: 4,
                ..
            })
        ));
    }

    #[test]
    fn closed_class_frequencies_are_uniform() {
        let ds = tiny_dataset(20, 20);
        let mut counts = [0usize; 20];
        let episodes = 600;
        for e in 0..episodes {
            let spec = EpisodeSpec {
                seed: derive_seed(2024, e),
                ..EpisodeSpec::default()
            };
            for &c in &sample_episode(&ds, &spec).unwrap().class_mapping {
                counts[c] += 1;
            }
        }
        // each class is closed with probability 5/20 per episode
        let p = 0.25;
        let mean = episodes as f64 * p;
        let sigma = (episodes as f64 * p * (1.0 - p)).sqrt();
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - mean).abs() <= 3.0 * sigma,
                "class {c}: {n} vs {mean} +- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn noiseless_items_are_exact() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..SyntheticConfig::default()
        };
        let syn = generate_synthetic(&cfg).unwrap();
        let items = syn.dataset.items();
        for class in 0..cfg.num_classes {
            let members = syn.dataset.class_items(class);
            for &i in members {
                assert_eq!(items[i].0, items[members[0]].0);
            }
            let f = &items[members[0]].0;
            let r = cfg.fg_regions[class];
            for a in 0..cfg.height {
                for b in 0..cfg.width {
                    let cell = f.cell(a * cfg.width + b);
                    if r.contains(a, b) {
                        for (c, &v) in cell.iter().enumerate() {
                            assert_eq!(v, if c == class { 1.0 } else { 0.0 });
                        }
                    } else {
                        assert_eq!(cell, cfg.bkg_signature.as_slice());
                    }
                }
            }
        }
    }

    #[test]
    fn masks_match_regions() {
        let cfg = SyntheticConfig::benchmark(5);
        let syn = generate_synthetic(&cfg).unwrap();
        for (i, (f, label)) in syn.dataset.items().iter().enumerate() {
            assert!(f.values().iter().all(|v| v.is_finite()));
            let r = cfg.fg_regions[*label];
            for a in 0..cfg.height {
                for b in 0..cfg.width {
                    let expected = if r.contains(a, b) { 1.0 } else { 0.0 };
                    assert_eq!(syn.masks[i].get(a, b), expected);
                }
            }
        }
    }

    #[test]
    fn noise_stays_in_noisy_channels() {
        let mut cfg = SyntheticConfig::new(3, 4, 4, 4, 12, 9);
        cfg.noise_sigma = 0.5;
        cfg.item_noise_sigma = 0.5;
        cfg.noisy_channels = Some(4);
        let syn = generate_synthetic(&cfg).unwrap();
        for (f, _) in syn.dataset.items() {
            for i in 0..16 {
                let cell = f.cell(i);
                assert!(cell[4..].iter().all(|&v| v == 0.0));
                assert!(cell[..3].iter().any(|&v| v != 0.0 && v != 1.0));
            }
        }
    }

    #[test]
    fn too_few_channels_rejected() {
        let cfg = SyntheticConfig::new(5, 2, 4, 4, 5, 0);
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
