//! On-disk dataset layout, splits, few-shot subsets and model-ready patches.
//!
//! A dataset directory holds `manifest.toml` plus, per split,
//! `{split}_images.bin` (raw `u8`, `count·C·H·W` bytes) and
//! `{split}_labels.bin` (`u16` little endian, `count·2` bytes).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::synthetic::{Samples, Task};
use crate::backbone::{patchify, BackboneConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("split '{0}' not found in manifest")]
    MissingSplit(String),
    #[error("{file}: expected {expected} bytes, found {found}")]
    SizeMismatch { file: PathBuf, expected: u64, found: u64 },
    #[error("label {label} in split '{split}' exceeds {classes} classes")]
    BadLabel { split: String, label: u16, classes: usize },
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientClass { class: usize, available: usize, requested: usize },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub images_file: String,
    pub labels_file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub task: Task,
    pub samples: usize,
    pub seed: u64,
}

/// Per-channel statistics of the train split, in `[0, 1]` pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub normalization: Normalization,
    pub splits: BTreeMap<String, SplitEntry>,
}

/// Stratified 80/20 split.
///
/// Each class is shuffled and contributes `round(0.8·n_c)` samples to
/// train. Classes with fewer than 2 samples cannot be stratified; they go to
/// train and a warning is returned for each.
pub fn split_vtab_style(labels: &[u16], num_classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut warnings = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == class).collect();
        members.shuffle(&mut rng);
        if members.len() < 2 {
            warnings.push(format!("class {class} has {} sample(s); cannot stratify", members.len()));
            train.extend(members);
            continue;
        }
        let n_train = ((members.len() as f64) * 0.8).round() as usize;
        let n_train = n_train.clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val, warnings)
}

/// `shots` samples per class: the prefix of a seeded per-class shuffle, so
/// larger shot counts contain smaller ones under the same seed.
pub fn few_shot_subsample(labels: &[u16], num_classes: usize, shots: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    let mut out = Vec::with_capacity(shots * num_classes);
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == class).collect();
        if members.len() < shots {
            return Err(DataError::InsufficientClass {
                class,
                available: members.len(),
                requested: shots,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..shots]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-channel mean and standard deviation of `samples` scaled to `[0, 1]`.
pub fn channel_stats(samples: &Samples) -> Normalization {
    let [c, h, w] = samples.image_shape;
    let plane = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for i in 0..samples.len() {
        for (ch, px) in samples.image(i).chunks(plane).enumerate() {
            for &p in px {
                let v = p as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (samples.len() * plane).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    Normalization { mean, std }
}

/// Writes the train/val dataset directory for `samples`.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    num_classes: usize,
    samples: &Samples,
    generator: Option<GeneratorInfo>,
    split_seed: u64,
) -> Result<(DatasetManifest, Vec<String>), DataError> {
    if samples.len() < 5 {
        return Err(DataError::Invalid(format!("need at least 5 samples to split, got {}", samples.len())));
    }
    let (train, val, warnings) = split_vtab_style(&samples.labels, num_classes, split_seed);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let train_set = samples.select(&train);
    let mut splits = BTreeMap::new();
    for (split, idx) in [("train", &train), ("val", &val)] {
        let subset = samples.select(idx);
        let entry = SplitEntry {
            images_file: format!("{split}_images.bin"),
            labels_file: format!("{split}_labels.bin"),
            count: subset.len(),
        };
        let ipath = dir.join(&entry.images_file);
        fs::write(&ipath, &subset.images).map_err(io_err(&ipath))?;
        let lpath = dir.join(&entry.labels_file);
        let bytes: Vec<u8> = subset.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        fs::write(&lpath, bytes).map_err(io_err(&lpath))?;
        splits.insert(split.to_string(), entry);
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        num_classes,
        image_shape: samples.image_shape,
        generator,
        normalization: channel_stats(&train_set),
        splits,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok((manifest, warnings))
}

/// A dataset directory with a parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| DataError::Manifest {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let [c, h, w] = manifest.image_shape;
        let bad = |reason: &str| DataError::Manifest {
            path: mpath.clone(),
            reason: reason.to_string(),
        };
        if manifest.num_classes == 0 || c * h * w == 0 {
            return Err(bad("num_classes and image_shape must be positive"));
        }
        if manifest.normalization.mean.len() != c || manifest.normalization.std.len() != c {
            return Err(bad("normalization must list one mean and std per channel"));
        }
        if manifest.normalization.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(bad("normalization std must be positive"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load_split(&self, split: &str) -> Result<Samples, DataError> {
        let entry = self
            .manifest
            .splits
            .get(split)
            .ok_or_else(|| DataError::MissingSplit(split.to_string()))?;
        let shape = self.manifest.image_shape;
        let ipath = self.root.join(&entry.images_file);
        let images = fs::read(&ipath).map_err(io_err(&ipath))?;
        let expected = (entry.count * shape.iter().product::<usize>()) as u64;
        if images.len() as u64 != expected {
            return Err(DataError::SizeMismatch {
                file: ipath,
                expected,
                found: images.len() as u64,
            });
        }
        let lpath = self.root.join(&entry.labels_file);
        let raw = fs::read(&lpath).map_err(io_err(&lpath))?;
        if raw.len() as u64 != 2 * entry.count as u64 {
            return Err(DataError::SizeMismatch {
                file: lpath,
                expected: 2 * entry.count as u64,
                found: raw.len() as u64,
            });
        }
        let labels: Vec<u16> = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= self.manifest.num_classes) {
            return Err(DataError::BadLabel {
                split: split.to_string(),
                label,
                classes: self.manifest.num_classes,
            });
        }
        Ok(Samples {
            image_shape: shape,
            images,
            labels,
        })
    }
}

/// Normalized, patchified images ready for the backbone.
#[derive(Clone, Debug)]
pub struct PatchSet<T> {
    patches: Vec<T>,
    labels: Vec<usize>,
    num_patches: usize,
    patch_dim: usize,
}

impl<T: Scalar> PatchSet<T> {
    pub fn new(samples: &Samples, norm: &Normalization, backbone: &BackboneConfig) -> Result<Self, DataError> {
        if samples.image_shape != backbone.image_shape {
            return Err(DataError::Invalid(format!(
                "images are {:?} but the backbone expects {:?}",
                samples.image_shape, backbone.image_shape
            )));
        }
        let [c, h, w] = samples.image_shape;
        let plane = h * w;
        let mut patches = Vec::with_capacity(samples.images.len());
        let mut scaled = vec![T::zero(); c * plane];
        for i in 0..samples.len() {
            for (j, &p) in samples.image(i).iter().enumerate() {
                let ch = j / plane;
                scaled[j] = T::lit((p as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]);
            }
            patchify(&scaled, samples.image_shape, backbone.patch_size, &mut patches);
        }
        Ok(Self {
            patches,
            labels: samples.labels.iter().map(|&l| l as usize).collect(),
            num_patches: backbone.num_patches(),
            patch_dim: backbone.patch_dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[indices.len(), N, C·p·p]` patches and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let stride = self.num_patches * self.patch_dim;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.patches[i * stride..(i + 1) * stride]);
        }
        let t = Tensor::new(vec![indices.len(), self.num_patches, self.patch_dim], data).expect("non-empty batch");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let stride = self.num_patches * self.patch_dim;
        let mut patches = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            patches.extend_from_slice(&self.patches[i * stride..(i + 1) * stride]);
        }
        Self {
            patches,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_patches: self.num_patches,
            patch_dim: self.patch_dim,
        }
    }
}
