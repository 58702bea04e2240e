//! Synthetic desk-scale datasets, label-noise injection, and splits.
//!
//! Multi-label samples are drawn from overlapping class-conditional
//! Gaussian clusters; a sample is positive for every cluster center
//! within a fixed radius of its own, so multi-label structure is
//! guaranteed. Segmentation images are Voronoi class-region maps with
//! class-conditional channel signatures plus Gaussian noise.
//!
//! Noise flags ride along for evaluation only: the trainer consumes a
//! [`TrainView`], which has no accessor for them.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("noise ratio must lie in [0, 0.6], got {0}")]
    NoiseRatioOutOfRange(f64),
    #[error("split fractions must sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("dataset file corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Which learning problem a dataset (and the model head) serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Multilabel,
    Segmentation,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Multilabel => write!(f, "multilabel"),
            TaskKind::Segmentation => write!(f, "segmentation"),
        }
    }
}

/// Per-sample labels for either task.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One binary vector of length C per sample.
    Multilabel(Vec<Vec<u8>>),
    /// One class index per pixel per sample.
    Pixel(Vec<Vec<u16>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Multilabel(v) => v.len(),
            Labels::Pixel(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generation parameters for the multi-label task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelSpec {
    pub num_samples: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for MultiLabelSpec {
    fn default() -> Self {
        MultiLabelSpec {
            num_samples: 2000,
            feature_dim: 20,
            num_classes: 6,
        }
    }
}

/// Generation parameters for the segmentation task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSpec {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl Default for SegmentationSpec {
    fn default() -> Self {
        SegmentationSpec {
            num_images: 500,
            height: 8,
            width: 8,
            channels: 8,
            num_classes: 5,
        }
    }
}

/// How and how much label noise to inject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

/// A complete dataset: features, labels, and hidden noise flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    /// Flat per-sample features: `[F]`, or `[P*F]` pixel-major for
    /// segmentation.
    pub features: Vec<Vec<f64>>,
    /// `[F]` for multilabel, `[P, F]` for segmentation.
    pub feature_shape: Vec<usize>,
    pub labels: Labels,
    pub num_classes: usize,
    /// Set on corrupted samples by [`inject_noise`]; hidden from training.
    noisy: Vec<bool>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn pixels(&self) -> usize {
        if self.feature_shape.len() == 2 {
            self.feature_shape[0]
        } else {
            1
        }
    }

    /// Noise flags, for evaluation and audit only.
    pub fn noise_flags(&self) -> &[bool] {
        &self.noisy
    }

    /// Histogram of positive-label counts per sample (multilabel only):
    /// entry `k` counts samples carrying exactly `k` positive labels.
    pub fn label_cardinality(&self) -> Option<Vec<usize>> {
        match &self.labels {
            Labels::Multilabel(rows) => {
                let mut hist = vec![0usize; self.num_classes + 1];
                for row in rows {
                    let k = row.iter().filter(|&&b| b == 1).count();
                    hist[k] += 1;
                }
                Some(hist)
            }
            Labels::Pixel(_) => None,
        }
    }

    /// Flag-stripped view for the training path.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView { data: self }
    }

    /// Row-major subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = match &self.labels {
            Labels::Multilabel(v) => {
                Labels::Multilabel(indices.iter().map(|&i| v[i].clone()).collect())
            }
            Labels::Pixel(v) => Labels::Pixel(indices.iter().map(|&i| v[i].clone()).collect()),
        };
        let noisy = indices.iter().map(|&i| self.noisy[i]).collect();
        Dataset {
            task: self.task,
            features,
            feature_shape: self.feature_shape.clone(),
            labels,
            num_classes: self.num_classes,
            noisy,
            seed: self.seed,
        }
    }
}

/// What the trainer is allowed to see: features and labels, never flags.
#[derive(Clone, Copy)]
pub struct TrainView<'a> {
    data: &'a Dataset,
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.data.task
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.data.feature_shape
    }

    pub fn features(&self, index: usize) -> &[f64] {
        &self.data.features[index]
    }

    pub fn labels(&self) -> &Labels {
        &self.data.labels
    }
}

/// Multi-label dataset: Gaussian clusters with radius-overlap labels.
/// Every sample carries at least one positive label by construction.
pub fn gen_multilabel(spec: &MultiLabelSpec, seed: u64) -> Result<Dataset> {
    if spec.num_samples == 0 || spec.feature_dim == 0 || spec.num_classes == 0 {
        return Err(DataError::InvalidDim(format!("{spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.num_classes;
    let f = spec.feature_dim;

    // Cluster centers on a sphere of radius 3; the label radius is tuned
    // so neighbouring centers overlap and samples pick up 1-3 labels.
    let mut centers = vec![vec![0.0f64; f]; c];
    for center in centers.iter_mut() {
        let mut norm = 0.0;
        for v in center.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-9);
        for v in center.iter_mut() {
            *v *= 3.0 / norm;
        }
    }
    let label_radius = 3.5;

    let mut features = Vec::with_capacity(spec.num_samples);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let anchor = rng.random_range(0..c);
        let mut x = vec![0.0f64; f];
        for (v, cv) in x.iter_mut().zip(&centers[anchor]) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = cv + 0.8 * noise;
        }
        let mut y = vec![0u8; c];
        for (k, center) in centers.iter().enumerate() {
            let d2: f64 = x
                .iter()
                .zip(center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= label_radius {
                y[k] = 1;
            }
        }
        // The anchor cluster is always close enough in expectation, but
        // guarantee the invariant for outlier draws.
        if y.iter().all(|&b| b == 0) {
            y[anchor] = 1;
        }
        features.push(x);
        labels.push(y);
    }
    Ok(Dataset {
        task: TaskKind::Multilabel,
        features,
        feature_shape: vec![f],
        labels: Labels::Multilabel(labels),
        num_classes: c,
        noisy: vec![false; spec.num_samples],
        seed,
    })
}

/// Segmentation dataset: Voronoi cells over random site points, each
/// cell assigned a class with a channel signature, plus feature noise.
pub fn gen_segmentation(spec: &SegmentationSpec, seed: u64) -> Result<Dataset> {
    if spec.num_images == 0
        || spec.height == 0
        || spec.width == 0
        || spec.channels == 0
        || spec.num_classes < 2
    {
        return Err(DataError::InvalidDim(format!("{spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, f, c) = (spec.height, spec.width, spec.channels, spec.num_classes);
    let pixels = h * w;

    // Class signatures: unit-ish directions in channel space, scaled so
    // classes are separable but not trivially so.
    let mut signatures = vec![vec![0.0f64; f]; c];
    for sig in signatures.iter_mut() {
        let mut norm = 0.0;
        for v in sig.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-9);
        for v in sig.iter_mut() {
            *v *= 2.0 / norm;
        }
    }

    let sites_per_image = 4.max(pixels / 12);
    let mut features = Vec::with_capacity(spec.num_images);
    let mut labels: Vec<Vec<u16>> = Vec::with_capacity(spec.num_images);
    for img in 0..spec.num_images {
        let mut sites = Vec::with_capacity(sites_per_image);
        for _ in 0..sites_per_image {
            let sy = rng.random_range(0.0..h as f64);
            let sx = rng.random_range(0.0..w as f64);
            let class = rng.random_range(0..c) as u16;
            sites.push((sy, sx, class));
        }
        // Force every class to appear somewhere in the dataset: cycle
        // the first site's class across images.
        sites[0].2 = ((img % c) as u16 + sites[0].2) % c as u16;

        let mut x = vec![0.0f64; pixels * f];
        let mut y = vec![0u16; pixels];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (s, &(sy, sx, _)) in sites.iter().enumerate() {
                    let d = (py as f64 - sy).powi(2) + (px as f64 - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                let class = sites[best].2;
                y[p] = class;
                for k in 0..f {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    x[p * f + k] = signatures[class as usize][k] + 0.7 * noise;
                }
            }
        }
        features.push(x);
        labels.push(y);
    }
    Ok(Dataset {
        task: TaskKind::Segmentation,
        features,
        feature_shape: vec![pixels, f],
        labels: Labels::Pixel(labels),
        num_classes: c,
        noisy: vec![false; spec.num_images],
        seed,
    })
}

/// Corrupts the labels of `floor(ratio * N)` uniformly chosen samples
/// and sets their flags. Features are never touched.
///
/// Multi-label: each bit flips independently with probability 0.5; if
/// the result equals the original, one random bit is re-flipped.
/// Segmentation: every pixel class is remapped by one random non-identity
/// class permutation per image, mimicking an outdated thematic map.
pub fn inject_noise(data: &mut Dataset, spec: &NoiseSpec) -> Result<()> {
    if !(0.0..=0.6).contains(&spec.ratio) {
        return Err(DataError::NoiseRatioOutOfRange(spec.ratio));
    }
    let n = data.len();
    let count = (spec.ratio * n as f64).floor() as usize;
    if count == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let chosen = &order[..count];

    match &mut data.labels {
        Labels::Multilabel(labels) => {
            for &i in chosen {
                let original = labels[i].clone();
                let y = &mut labels[i];
                for bit in y.iter_mut() {
                    if rng.random_bool(0.5) {
                        *bit ^= 1;
                    }
                }
                if *y == original {
                    let k = rng.random_range(0..y.len());
                    y[k] ^= 1;
                }
                data.noisy[i] = true;
            }
        }
        Labels::Pixel(labels) => {
            let c = data.num_classes;
            for &i in chosen {
                let mut perm: Vec<u16> = (0..c as u16).collect();
                loop {
                    perm.shuffle(&mut rng);
                    if perm.iter().enumerate().any(|(k, &v)| v != k as u16) {
                        break;
                    }
                }
                for p in labels[i].iter_mut() {
                    *p = perm[*p as usize];
                }
                data.noisy[i] = true;
            }
        }
    }
    Ok(())
}

/// Deterministic shuffled split into train/validation/test.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<[Dataset; 3]> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 || fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 {
        return Err(DataError::BadFractions([
            fractions.0,
            fractions.1,
            fractions.2,
        ]));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = (fractions.1 * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let train = data.subset(&order[..n_train]);
    let val = data.subset(&order[n_train..n_train + n_val]);
    let test = data.subset(&order[n_train + n_val..]);
    Ok([train, val, test])
}

// ── File format ──────────────────────────────────────────────────────
//
// `<base>.manifest` is a small key-value text file; `<base>.bin` holds
// the feature block (f64 LE), the label block (f64 LE), and the flag
// block (one byte per sample), in that order.

/// Writes `base.manifest` and `base.bin`.
pub fn save_dataset(data: &Dataset, base: &Path) -> Result<()> {
    let n = data.len();
    let feat_len: usize = data.feature_shape.iter().product();
    let label_width = match &data.labels {
        Labels::Multilabel(_) => data.num_classes,
        Labels::Pixel(_) => data.pixels(),
    };
    let mut manifest = String::new();
    manifest.push_str("format svae-reweight-dataset v1\n");
    manifest.push_str(&format!("task {}\n", data.task));
    manifest.push_str(&format!("samples {n}\n"));
    manifest.push_str(&format!(
        "feature_shape {}\n",
        data.feature_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    manifest.push_str(&format!("classes {}\n", data.num_classes));
    manifest.push_str(&format!("seed {}\n", data.seed));
    fs::write(base.with_extension("manifest"), manifest)?;

    let mut bin = Vec::with_capacity(n * (feat_len + label_width) * 8 + n);
    for row in &data.features {
        for v in row {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &data.labels {
        Labels::Multilabel(rows) => {
            for row in rows {
                for &b in row {
                    bin.extend_from_slice(&(b as f64).to_le_bytes());
                }
            }
        }
        Labels::Pixel(rows) => {
            for row in rows {
                for &p in row {
                    bin.extend_from_slice(&(p as f64).to_le_bytes());
                }
            }
        }
    }
    for &flag in &data.noisy {
        bin.push(flag as u8);
    }
    fs::write(base.with_extension("bin"), bin)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]; round-trips bit-exactly.
pub fn load_dataset(base: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(base.with_extension("manifest"))?;
    let mut task = None;
    let mut samples = None;
    let mut feature_shape: Option<Vec<usize>> = None;
    let mut classes = None;
    let mut seed = None;
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("task") => {
                task = Some(match parts.next() {
                    Some("multilabel") => TaskKind::Multilabel,
                    Some("segmentation") => TaskKind::Segmentation,
                    other => return Err(DataError::Corrupt(format!("unknown task {other:?}"))),
                })
            }
            Some("samples") => samples = parts.next().and_then(|v| v.parse().ok()),
            Some("feature_shape") => {
                feature_shape = Some(
                    parts
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| DataError::Corrupt(e.to_string()))?,
                )
            }
            Some("classes") => classes = parts.next().and_then(|v| v.parse().ok()),
            Some("seed") => seed = parts.next().and_then(|v| v.parse().ok()),
            _ => {}
        }
    }
    let task = task.ok_or_else(|| DataError::Corrupt("missing task".into()))?;
    let n: usize = samples.ok_or_else(|| DataError::Corrupt("missing samples".into()))?;
    let feature_shape =
        feature_shape.ok_or_else(|| DataError::Corrupt("missing feature_shape".into()))?;
    let num_classes: usize = classes.ok_or_else(|| DataError::Corrupt("missing classes".into()))?;
    let seed: u64 = seed.ok_or_else(|| DataError::Corrupt("missing seed".into()))?;

    let feat_len: usize = feature_shape.iter().product();
    let label_width = match task {
        TaskKind::Multilabel => num_classes,
        TaskKind::Segmentation => feature_shape[0],
    };
    let mut file = fs::File::open(base.with_extension("bin"))?;
    let mut bin = Vec::new();
    file.read_to_end(&mut bin)?;
    let expected = n * (feat_len + label_width) * 8 + n;
    if bin.len() != expected {
        return Err(DataError::Corrupt(format!(
            "binary block is {} bytes, expected {expected}",
            bin.len()
        )));
    }
    let read_f64 = |bytes: &[u8], idx: usize| -> f64 {
        f64::from_le_bytes(bytes[idx * 8..(idx + 1) * 8].try_into().unwrap())
    };
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        features.push((0..feat_len).map(|k| read_f64(&bin, i * feat_len + k)).collect());
    }
    let label_base = n * feat_len;
    let labels = match task {
        TaskKind::Multilabel => Labels::Multilabel(
            (0..n)
                .map(|i| {
                    (0..label_width)
                        .map(|k| read_f64(&bin, label_base + i * label_width + k) as u8)
                        .collect()
                })
                .collect(),
        ),
        TaskKind::Segmentation => Labels::Pixel(
            (0..n)
                .map(|i| {
                    (0..label_width)
                        .map(|k| read_f64(&bin, label_base + i * label_width + k) as u16)
                        .collect()
                })
                .collect(),
        ),
    };
    let flag_base = (label_base + n * label_width) * 8;
    let noisy: Vec<bool> = bin[flag_base..flag_base + n].iter().map(|&b| b != 0).collect();
    Ok(Dataset {
        task,
        features,
        feature_shape,
        labels,
        num_classes,
        noisy,
        seed,
    })
}

/// Loads features and labels from two comma-separated text files: one
/// sample per line, features as floats, labels as 0/1 bits (multilabel)
/// or class indices (segmentation, pixel-major).
pub fn load_delimited(
    features_path: &Path,
    labels_path: &Path,
    task: TaskKind,
    feature_shape: Vec<usize>,
    num_classes: usize,
) -> Result<Dataset> {
    let parse_rows = |path: &Path| -> Result<Vec<Vec<f64>>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| DataError::Corrupt(format!("{path:?}: {e}")))
                    })
                    .collect()
            })
            .collect()
    };
    let features = parse_rows(features_path)?;
    let label_rows = parse_rows(labels_path)?;
    if features.len() != label_rows.len() {
        return Err(DataError::Corrupt(format!(
            "{} feature rows vs {} label rows",
            features.len(),
            label_rows.len()
        )));
    }
    let feat_len: usize = feature_shape.iter().product();
    if let Some(bad) = features.iter().find(|r| r.len() != feat_len) {
        return Err(DataError::Corrupt(format!(
            "feature row has {} values, expected {feat_len}",
            bad.len()
        )));
    }
    let n = features.len();
    let labels = match task {
        TaskKind::Multilabel => Labels::Multilabel(
            label_rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            if v == 0.0 || v == 1.0 {
                                Ok(v as u8)
                            } else {
                                Err(DataError::Corrupt(format!("label bit {v} not in {{0,1}}")))
                            }
                        })
                        .collect()
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::Segmentation => Labels::Pixel(
            label_rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            let idx = v as u16;
                            if v.fract() == 0.0 && (idx as usize) < num_classes {
                                Ok(idx)
                            } else {
                                Err(DataError::Corrupt(format!("class index {v} invalid")))
                            }
                        })
                        .collect()
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Dataset {
        task,
        features,
        feature_shape,
        labels,
        num_classes,
        noisy: vec![false; n],
        seed: 0,
    })
}
