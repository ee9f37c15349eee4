//! Dataset manifests, stratified splitting, and materialization into
//! preprocessed float tensors ready for batching.
//!
//! A manifest is the durable record of a dataset: every sample's source,
//! label, split and augmentation seed, plus a fingerprint of the
//! preprocessing parameters. Splits and augmentation seeds are pure
//! functions of (seed, sample identity), so a manifest regenerated from the
//! same inputs is byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::pipeline::{self, Preprocess};
use crate::image::{bmp, synthetic, RgbImage};
use crate::rng::{self, mix, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// Path relative to the dataset root.
    File(PathBuf),
    Synthetic { class: usize, index: usize },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p) => write!(f, "{}", p.display()),
            Source::Synthetic { class, index } => write!(f, "synthetic:{class}:{index}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub source: Source,
    pub label: usize,
    pub split: Split,
    /// Seed for this sample's augmentation rotation (applied to training
    /// samples only).
    pub aug_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub classes: usize,
    pub seed: u64,
    /// Fingerprint of the preprocessing parameters (pipeline::fingerprint).
    pub fingerprint: u64,
    pub records: Vec<Record>,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Stratified split sizes: round(fraction * n), clamped so both splits keep
/// at least one sample.
fn train_count(per_class: usize, fraction: f64) -> usize {
    ((fraction * per_class as f64).round() as usize).clamp(1, per_class - 1)
}

/// Assign splits per class. `class_sizes[c]` samples of class c, ordered by
/// their in-class index; assignment shuffles in-class indices with a
/// class-specific stream so it depends only on (seed, class, index).
pub fn assign_splits(class_sizes: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<Split>>> {
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::config(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut out = Vec::with_capacity(class_sizes.len());
    for (class, &n) in class_sizes.iter().enumerate() {
        if n < 2 {
            return Err(Error::config(format!(
                "class {class} has {n} samples; need at least 2 to split"
            )));
        }
        let take = train_count(n, fraction);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::rng_for(seed, stream::SHUFFLE, class as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut splits = vec![Split::Test; n];
        for &idx in order.iter().take(take) {
            splits[idx] = Split::Train;
        }
        out.push(splits);
    }
    Ok(out)
}

/// Augmentation seed for one sample; pure in (seed, class, index).
pub fn augmentation_seed(seed: u64, class: usize, index: usize) -> u64 {
    mix(rng::derive(seed, stream::AUGMENT, (class as u64) << 32 | index as u64))
}

/// Build the manifest for a synthetic dataset (no pixels involved).
pub fn synthetic_manifest(
    classes: usize,
    per_class: usize,
    seed: u64,
    fraction: f64,
    opts: &Preprocess,
) -> Result<Manifest> {
    let splits = assign_splits(&vec![per_class; classes], fraction, seed)?;
    let mut records = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for index in 0..per_class {
            records.push(Record {
                source: Source::Synthetic { class, index },
                label: class,
                split: splits[class][index],
                aug_seed: augmentation_seed(seed, class, index),
            });
        }
    }
    Ok(Manifest { classes, seed, fingerprint: pipeline::fingerprint(opts), records })
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# dataset manifest\n");
        s.push_str(&format!("fingerprint {:016x}\n", self.fingerprint));
        s.push_str(&format!("classes {}\n", self.classes));
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("samples {}\n", self.records.len()));
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:016x}\n",
                r.source, r.label, r.split, r.aug_seed
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Manifest> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::data(format!("manifest: missing `{name}` line")))?;
            line.strip_prefix(name)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::data(format!("manifest: expected `{name}`, got `{line}`")))
        };
        let fingerprint = u64::from_str_radix(&field("fingerprint")?, 16)
            .map_err(|e| Error::data(format!("manifest: bad fingerprint: {e}")))?;
        let classes: usize = field("classes")?
            .parse()
            .map_err(|e| Error::data(format!("manifest: bad class count: {e}")))?;
        let seed: u64 =
            field("seed")?.parse().map_err(|e| Error::data(format!("manifest: bad seed: {e}")))?;
        let samples: usize = field("samples")?
            .parse()
            .map_err(|e| Error::data(format!("manifest: bad sample count: {e}")))?;

        let mut records = Vec::with_capacity(samples);
        for line in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::data(format!(
                    "manifest: record needs 4 tab-separated fields, got `{line}`"
                )));
            }
            let source = if let Some(rest) = parts[0].strip_prefix("synthetic:") {
                let mut it = rest.split(':');
                let class = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::data(format!("manifest: bad source `{}`", parts[0])))?;
                let index = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::data(format!("manifest: bad source `{}`", parts[0])))?;
                Source::Synthetic { class, index }
            } else {
                Source::File(PathBuf::from(parts[0]))
            };
            let label: usize = parts[1]
                .parse()
                .map_err(|e| Error::data(format!("manifest: bad label `{}`: {e}", parts[1])))?;
            if label >= classes {
                return Err(Error::data(format!(
                    "manifest: label {label} out of range for {classes} classes"
                )));
            }
            let split = match parts[2] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::data(format!("manifest: unknown split `{other}`")))
                }
            };
            let aug_seed = u64::from_str_radix(parts[3], 16)
                .map_err(|e| Error::data(format!("manifest: bad augmentation seed: {e}")))?;
            records.push(Record { source, label, split, aug_seed });
        }
        if records.len() != samples {
            return Err(Error::data(format!(
                "manifest: header says {samples} samples, found {}",
                records.len()
            )));
        }
        Ok(Manifest { classes, seed, fingerprint, records })
    }

    pub fn train_count(&self) -> usize {
        self.records.iter().filter(|r| r.split == Split::Train).count()
    }
}

/// A dataset materialized as preprocessed float inputs, ready for batching.
/// Augmentation is applied once per training sample from its manifest seed;
/// test samples are never augmented.
pub struct LoadedDataset {
    pub classes: usize,
    pub fingerprint: u64,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl LoadedDataset {
    fn materialize(
        manifest: &Manifest,
        images: Vec<RgbImage>,
        opts: &Preprocess,
        augment: bool,
    ) -> LoadedDataset {
        let mut inputs = Vec::with_capacity(images.len());
        let mut labels = Vec::with_capacity(images.len());
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        for (i, (record, image)) in manifest.records.iter().zip(images).enumerate() {
            let sample_opts = Preprocess {
                invert: opts.invert,
                augment_seed: (augment && record.split == Split::Train)
                    .then_some(record.aug_seed),
            };
            inputs.push(pipeline::run(&image, &sample_opts));
            labels.push(record.label);
            match record.split {
                Split::Train => train_indices.push(i),
                Split::Test => test_indices.push(i),
            }
        }
        LoadedDataset {
            classes: manifest.classes,
            fingerprint: manifest.fingerprint,
            inputs,
            labels,
            train_indices,
            test_indices,
        }
    }

    /// Generate, split and preprocess a synthetic dataset in memory.
    pub fn from_synthetic(
        classes: usize,
        per_class: usize,
        seed: u64,
        fraction: f64,
        opts: &Preprocess,
        augment: bool,
    ) -> Result<(Manifest, LoadedDataset)> {
        let manifest = synthetic_manifest(classes, per_class, seed, fraction, opts)?;
        let samples = synthetic::generate(classes, per_class, seed)?;
        let images: Vec<RgbImage> = samples.into_iter().map(|s| s.image).collect();
        let loaded = Self::materialize(&manifest, images, opts, augment);
        Ok((manifest, loaded))
    }

    /// Load a prepared dataset directory: manifest plus BMP files.
    pub fn from_dir(
        root: &Path,
        opts: &Preprocess,
        augment: bool,
    ) -> Result<(Manifest, LoadedDataset)> {
        let manifest_path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::data(format!("cannot read manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest = Manifest::from_text(&text)?;
        let mut images = Vec::with_capacity(manifest.records.len());
        for record in &manifest.records {
            let image = match &record.source {
                Source::File(rel) => {
                    let path = root.join(rel);
                    let bytes = fs::read(&path).map_err(|e| {
                        Error::data(format!("cannot read {}: {e}", path.display()))
                    })?;
                    bmp::decode(&bytes)
                        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
                }
                Source::Synthetic { class, index } => {
                    let jitter = synthetic::sample_jitter(manifest.seed, *class, *index);
                    synthetic::render_sample(*class, &jitter)
                }
            };
            images.push(image);
        }
        let loaded = Self::materialize(&manifest, images, opts, augment);
        Ok((manifest, loaded))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Write a synthetic dataset to disk in the on-disk layout real data uses:
/// one zero-padded directory per class with BMP files, plus the manifest.
pub fn write_synthetic_dataset(
    root: &Path,
    classes: usize,
    per_class: usize,
    seed: u64,
    fraction: f64,
    opts: &Preprocess,
) -> Result<Manifest> {
    let samples = synthetic::generate(classes, per_class, seed)?;
    let mut manifest = synthetic_manifest(classes, per_class, seed, fraction, opts)?;
    for (record, sample) in manifest.records.iter_mut().zip(&samples) {
        let rel = PathBuf::from(format!("{:02}", sample.class))
            .join(format!("{:04}.bmp", sample.index));
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("class dir"))?;
        fs::write(&path, bmp::encode(&sample.image))?;
        record.source = Source::File(rel);
    }
    fs::write(root.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}
