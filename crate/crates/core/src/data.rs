//! Datasets: MNIST (IDX files), CIFAR-10 (binary batches) and synthetic
//! Gaussian blobs.
//!
//! Pixels are scaled to `[0, 1]` and then standardized per channel with the
//! mean and standard deviation of the training split. Vector datasets treat
//! every feature as its own channel.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "SSA_DATA_DIR";

/// Per-channel affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of `unit` (shape `[n, ...sample]`), one channel per
    /// leading sample dimension.
    pub fn fit(unit: &Tensor) -> Self {
        let (channels, spatial) = channel_layout(unit.shape());
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for sample in unit.data().chunks_exact(channels * spatial) {
            for (c, plane) in sample.chunks_exact(spatial).enumerate() {
                for &v in plane {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (unit.rows() * spatial) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let (channels, spatial) = channel_layout(x.shape());
        let mut out = x.clone();
        for sample in out.data_mut().chunks_exact_mut(channels * spatial) {
            for (c, plane) in sample.chunks_exact_mut(spatial).enumerate() {
                for v in plane {
                    *v = f(*v, self.mean[c], self.std[c]);
                }
            }
        }
        out
    }

    pub fn apply(&self, unit: &Tensor) -> Tensor {
        self.map(unit, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, normalized: &Tensor) -> Tensor {
        self.map(normalized, |v, m, s| v * s + m)
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 | 1 => (1, 1),
        2 => (shape[1], 1),
        _ => (shape[1], shape[2..].iter().product()),
    }
}

/// One split of a dataset, already normalized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
    /// Features are images with pixel values in `[0, 1]` before
    /// normalization.
    pub image: bool,
}

impl Dataset {
    /// Normalizes `unit` with `normalization`, or with its own statistics
    /// when `None` (the training split).
    pub fn new(
        unit: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        image: bool,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        if unit.shape().len() < 2 || unit.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                unit.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let normalization = normalization.unwrap_or_else(|| Normalization::fit(&unit));
        if normalization.mean.len() != channel_layout(unit.shape()).0 {
            return Err(Error::invalid(
                "normalization channel count does not match the data",
            ));
        }
        Ok(Self {
            features: normalization.apply(&unit),
            labels,
            num_classes,
            normalization,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Features mapped back to `[0, 1]` pixel scale.
    pub fn unit(&self) -> Tensor {
        self.normalization.invert(&self.features)
    }

    /// First `n` items (all if `n >= len`).
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let idx: Vec<usize> = (0..n).collect();
        self.features = self.features.gather_rows(&idx);
        self.labels.truncate(n);
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

fn default_train_size() -> usize {
    1000
}
fn default_test_size() -> usize {
    1000
}
fn default_dim() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_separation() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `classes` unit-variance Gaussian clusters in `dim` dimensions whose
    /// centers are pairwise `separation` apart.
    SyntheticBlobs {
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default = "default_test_size")]
        test_size: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Mnist {
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// First 10,000 training images unless `full` is set.
    Cifar10Subset {
        #[serde(default)]
        full: bool,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn mnist() -> Self {
        DatasetSpec::Mnist {
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn blobs(
        train_size: usize,
        test_size: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    ) -> Self {
        DatasetSpec::SyntheticBlobs {
            train_size,
            test_size,
            dim,
            classes,
            separation,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::SyntheticBlobs { .. } => "synthetic-blobs",
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::Cifar10Subset { .. } => "cifar10-subset",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::SyntheticBlobs {
            train_size,
            test_size,
            dim,
            classes,
            separation,
        } = *self
        {
            if train_size == 0 || test_size == 0 {
                return Err(Error::Config("blob dataset sizes must be positive".into()));
            }
            if classes < 2 || dim < classes {
                return Err(Error::Config(format!(
                    "blobs need 2 <= classes <= dim, got {classes} classes in {dim} dimensions"
                )));
            }
            if !(separation > 0.0 && separation.is_finite()) {
                return Err(Error::Config(format!(
                    "blob separation must be positive, got {separation}"
                )));
            }
        }
        Ok(())
    }

    /// Loads both splits. File-backed datasets are read from `root`; blobs
    /// are generated from `rng`.
    pub fn load(&self, root: &Path, rng: &mut Rng) -> Result<Split> {
        self.validate()?;
        let mut split = match *self {
            DatasetSpec::SyntheticBlobs {
                train_size,
                test_size,
                dim,
                classes,
                separation,
            } => synthetic_blobs(train_size, test_size, dim, classes, separation, rng)?,
            DatasetSpec::Mnist { .. } => load_mnist(&root.join("mnist"))?,
            DatasetSpec::Cifar10Subset { full, .. } => {
                load_cifar10(&root.join("cifar-10-batches-bin"), full)?
            }
        };
        let (train_limit, test_limit) = match *self {
            DatasetSpec::Mnist {
                train_limit,
                test_limit,
            } => (train_limit, test_limit),
            DatasetSpec::Cifar10Subset { test_limit, .. } => (None, test_limit),
            DatasetSpec::SyntheticBlobs { .. } => (None, None),
        };
        if let Some(n) = train_limit {
            split.train.truncate(n);
        }
        if let Some(n) = test_limit {
            split.test.truncate(n);
        }
        Ok(split)
    }
}

/// `$SSA_DATA_DIR`, or `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX file of unsigned bytes; returns dims and payload.
pub fn parse_idx(bytes: &[u8], path: &Path, expected_rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(
            path,
            2,
            format!("unsupported IDX element type 0x{:02x}", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank != expected_rank {
        return Err(format_err(
            path,
            3,
            format!("IDX rank {rank}, expected {expected_rank}"),
        ));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len(), "truncated IDX dimensions"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() < header + n {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated IDX payload: expected {n} bytes after offset {header}"),
        ));
    }
    if bytes.len() > header + n {
        return Err(format_err(
            path,
            header + n,
            "trailing bytes after IDX payload",
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn idx_images(path: &Path) -> Result<Tensor> {
    let (dims, raw) = parse_idx(&read(path)?, path, 3)?;
    let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

fn idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (_, raw) = parse_idx(&read(path)?, path, 1)?;
    Ok(raw.into_iter().map(usize::from).collect())
}

/// MNIST from the four uncompressed IDX files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<Split> {
    let split = |images: &str, labels: &str| -> Result<(Tensor, Vec<usize>)> {
        let x = idx_images(&dir.join(images))?;
        let y = idx_labels(&dir.join(labels))?;
        if x.rows() != y.len() {
            return Err(Error::invalid(format!(
                "{images} has {} images but {labels} has {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok((x, y))
    };
    let (train_x, train_y) = split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_x, test_y) = split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let train = Dataset::new(train_x, train_y, 10, true, None)?;
    let test = Dataset::new(test_x, test_y, 10, true, Some(train.normalization.clone()))?;
    Ok(Split { train, test })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary batches: one label byte then 3072 channel-major
/// pixel bytes per record.
pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(path, offset, "truncated CIFAR-10 record"));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(
                path,
                i * CIFAR_RECORD,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn cifar_files(dir: &Path, files: &[String]) -> Result<(Tensor, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let (p, l) = parse_cifar(&read(&path)?, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?, labels))
}

/// CIFAR-10; only `data_batch_1` (10,000 images) for training unless `full`.
pub fn load_cifar10(dir: &Path, full: bool) -> Result<Split> {
    let batches = if full { 5 } else { 1 };
    let train_files: Vec<String> = (1..=batches)
        .map(|i| format!("data_batch_{i}.bin"))
        .collect();
    let (train_x, train_y) = cifar_files(dir, &train_files)?;
    let (test_x, test_y) = cifar_files(dir, &["test_batch.bin".to_string()])?;
    let train = Dataset::new(train_x, train_y, 10, true, None)?;
    let test = Dataset::new(test_x, test_y, 10, true, Some(train.normalization.clone()))?;
    Ok(Split { train, test })
}

/// Blobs with class `k` centered at `(separation / √2) · e_k`, so every pair
/// of centers is `separation` apart. Labels cycle through the classes and
/// the training split is shuffled.
pub fn synthetic_blobs(
    train_size: usize,
    test_size: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Split> {
    let scale = separation / SQRT_2;
    let mut make = |n: usize, shuffle: bool| -> Result<(Tensor, Vec<usize>)> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        if shuffle {
            labels.shuffle(rng);
        }
        let mut data = Vec::with_capacity(n * dim);
        for &y in &labels {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                data.push(if j == y { scale + z } else { z });
            }
        }
        Ok((Tensor::new(vec![n, dim], data)?, labels))
    };
    let (train_x, train_y) = make(train_size, true)?;
    let (test_x, test_y) = make(test_size, false)?;
    let train = Dataset::new(train_x, train_y, classes, false, None)?;
    let test = Dataset::new(
        test_x,
        test_y,
        classes,
        false,
        Some(train.normalization.clone()),
    )?;
    Ok(Split { train, test })
}

/// Standard deviation of the additive noise at `severity`, on `[0, 1]`
/// pixel scale.
pub fn noise_std(severity: u32) -> f64 {
    0.04 * severity as f64
}

/// Additive Gaussian noise on the pixel scale, clamped to `[0, 1]` and
/// re-normalized with the dataset's own statistics.
pub fn corrupt(ds: &Dataset, severity: u32, rng: &mut Rng) -> Result<Dataset> {
    if !ds.image {
        return Err(Error::invalid("corruption applies to image datasets only"));
    }
    if severity == 0 {
        return Err(Error::invalid("corruption severity starts at 1"));
    }
    let noise = Normal::new(0.0, noise_std(severity)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut unit = ds.unit();
    for v in unit.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Dataset::new(
        unit,
        ds.labels.clone(),
        ds.num_classes,
        true,
        Some(ds.normalization.clone()),
    )
}
