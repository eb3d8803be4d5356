//! MNIST IDX and CIFAR-10 binary loaders plus a synthetic stand-in.
//!
//! Pixels are scaled to `[0, 1]` and then normalized per channel. Every
//! parse error names the byte offset where the file stopped making sense.

use std::path::{Path, PathBuf};

use lts_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, DatasetKind};
use crate::error::{HarnessError, Result};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;

/// Labelled samples stored as normalized `f32`, `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub sample_shape: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// `(N, C, H, W)`.
    pub fn shape(&self) -> [usize; 4] {
        let [c, h, w] = self.sample_shape;
        [self.len(), c, h, w]
    }

    /// Keep the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.sample_len());
        }
    }

    /// Gather the samples at `indices` into a batch tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.images[i * len..(i + 1) * len].iter().map(|&v| T::of(v as f64)));
        }
        let [c, h, w] = self.sample_shape;
        let x = Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }
}

/// A parsed IDX file: dimensions and raw unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| HarnessError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("expected 4-byte {what} at offset {offset}"),
        })
}

/// Parse an IDX byte buffer whose magic must equal `expected_magic`.
pub fn parse_idx(bytes: &[u8], path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != expected_magic {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d, path, "dimension")? as usize);
    }
    let start = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let end = start + count;
    if bytes.len() < end {
        return Err(HarnessError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            msg: format!("dimensions {dims:?} need {count} data bytes from offset {start}"),
        });
    }
    if bytes.len() > end {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: end as u64,
            msg: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

fn check_labels(labels: &[u8], path: &Path, base: usize, stride: usize) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= CLASSES) {
        Some(i) => Err(HarnessError::Format {
            path: path.to_path_buf(),
            offset: (base + i * stride) as u64,
            msg: format!("label {} exceeds 9", labels[i]),
        }),
        None => Ok(()),
    }
}

fn broadcast(values: &[f64], channels: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; channels]),
        n if n == channels => Ok(values.to_vec()),
        n => Err(HarnessError::invalid(format!(
            "{what} has {n} entries for {channels} channels"
        ))),
    }
}

/// Scale bytes to `[0, 1]` and normalize each channel.
fn normalize_pixels(raw: &[u8], sample_shape: [usize; 3], mean: &[f64], std: &[f64]) -> Result<Vec<f32>> {
    let [c, h, w] = sample_shape;
    let mean = broadcast(mean, c, "normalization mean")?;
    let std = broadcast(std, c, "normalization std")?;
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(HarnessError::invalid(format!("normalization std must be positive, got {s}")));
    }
    let plane = h * w;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let ch = (i / plane) % c;
            ((b as f64 / 255.0 - mean[ch]) / std[ch]) as f32
        })
        .collect())
}

/// Load an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path, mean: &[f64], std: &[f64]) -> Result<Dataset> {
    load_idx_limited(images, labels, mean, std, None)
}

/// [`load_idx`] keeping only the first `limit` samples. The whole file is
/// still validated.
pub fn load_idx_limited(
    images: &Path,
    labels: &Path,
    mean: &[f64],
    std: &[f64],
    limit: Option<usize>,
) -> Result<Dataset> {
    let img = parse_idx(&read(images)?, images, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&read(labels)?, labels, IDX_LABELS_MAGIC)?;
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(HarnessError::Format {
            path: labels.to_path_buf(),
            offset: 4,
            msg: format!("{} labels for {n} images", lab.dims[0]),
        });
    }
    check_labels(&lab.data, labels, 8, 1)?;
    let keep = limit.map_or(n, |l| l.min(n));
    let shape = [1, h, w];
    let mut labels = lab.data;
    labels.truncate(keep);
    Ok(Dataset {
        images: normalize_pixels(&img.data[..keep * h * w], shape, mean, std)?,
        labels,
        sample_shape: shape,
    })
}

/// Load and concatenate CIFAR-10 binary batch files.
pub fn load_cifar10_bin(paths: &[PathBuf], mean: &[f64], std: &[f64]) -> Result<Dataset> {
    let shape = [3, 32, 32];
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return Err(HarnessError::Truncated {
                path: path.clone(),
                offset: whole as u64,
                msg: format!(
                    "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        let batch_labels: Vec<u8> = bytes.chunks_exact(CIFAR_RECORD).map(|r| r[0]).collect();
        check_labels(&batch_labels, path, 0, CIFAR_RECORD)?;
        labels.extend(batch_labels);
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            raw.extend_from_slice(&rec[1..]);
        }
    }
    Ok(Dataset {
        images: normalize_pixels(&raw, shape, mean, std)?,
        labels,
        sample_shape: shape,
    })
}

/// Ten noisy class prototypes; learnable but not linearly trivial at high noise.
pub fn synthetic(n: usize, sample_shape: [usize; 3], seed: u64, split: u64) -> Dataset {
    let len: usize = sample_shape.iter().product();
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f32>> = (0..CLASSES)
        .map(|_| (0..len).map(|_| proto_rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (split.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut images = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        labels.push(class as u8);
        images.extend(prototypes[class].iter().map(|&p| p + rng.random_range(-1.5f32..1.5)));
    }
    Dataset {
        images,
        labels,
        sample_shape,
    }
}

/// Fixed so synthetic runs with different seeds share one dataset.
const SYNTHETIC_SEED: u64 = 0x5eed;

/// Training and test sets for a run, truncated to the configured limits.
pub fn load_split(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (mean, std) = cfg.normalization();
    let dir = &cfg.path;
    let (mut train, mut test) = match cfg.kind {
        DatasetKind::Idx => (
            load_idx_limited(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                &mean,
                &std,
                cfg.train_limit,
            )?,
            load_idx_limited(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
                &mean,
                &std,
                cfg.test_limit,
            )?,
        ),
        DatasetKind::Cifar10Bin => {
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar10_bin(&train_files, &mean, &std)?,
                load_cifar10_bin(&[dir.join("test_batch.bin")], &mean, &std)?,
            )
        }
        DatasetKind::Synthetic => (
            synthetic(cfg.synthetic_train, cfg.shape, SYNTHETIC_SEED, 0),
            synthetic(cfg.synthetic_test, cfg.shape, SYNTHETIC_SEED, 1),
        ),
    };
    if let Some(n) = cfg.train_limit {
        train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        test.truncate(n);
    }
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::invalid("training and test sets must be non-empty"));
    }
    Ok((train, test))
}
