//! Datasets: IDX and CIFAR-10 binary parsing, synthetic blob data,
//! per-channel normalization, batching and the balanced label sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        if !images.is_finite() {
            return Err(Error::NumericFault { op: "dataset" });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample shape (`[c, h, w]` or `[features]`).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples `[start, end)` as a batch.
    pub fn batch(&self, start: usize, end: usize) -> Result<(Tensor, &[usize])> {
        Ok((self.images.slice_rows(start, end)?, &self.labels[start..end]))
    }

    /// Consecutive `[start, end)` ranges of at most `batch_size` samples.
    pub fn batch_ranges(&self, batch_size: usize) -> Vec<(usize, usize)> {
        let bs = batch_size.max(1);
        (0..self.len())
            .step_by(bs)
            .map(|s| (s, (s + bs).min(self.len())))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Dataset::new(self.images.select_rows(indices)?, labels, self.classes, self.split)?;
        out.norm = self.norm.clone();
        Ok(out)
    }

    /// Deterministic sample order for one training epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn channel_layout(&self) -> (usize, usize) {
        let s = self.sample_shape();
        let c = s[0];
        (c, s[1..].iter().product())
    }

    /// Mean and population standard deviation per channel.
    pub fn channel_stats(&self) -> NormStats {
        let (c, spatial) = self.channel_layout();
        let n = self.len();
        let data = self.images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                sum += data[base..base + spatial].iter().sum::<f64>();
            }
            let m = sum / (n * spatial) as f64;
            let mut ss = 0.0;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                ss += data[base..base + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            std[ch] = (ss / (n * spatial) as f64).sqrt();
        }
        NormStats { mean, std }
    }

    fn map_channels(&self, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (c, spatial) = self.channel_layout();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::InvalidArgument(format!(
                "normalization stats for {} channels, data has {c}",
                stats.mean.len()
            )));
        }
        let mut images = self.images.clone();
        for (j, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (j / spatial) % c;
            *v = f(*v, stats.mean[ch], stats.std[ch]);
        }
        Ok(images)
    }

    /// `(x − mean) / std` per channel; zero std divides by 1.
    pub fn normalize(&self, stats: &NormStats) -> Result<Dataset> {
        if self.norm.is_some() {
            return Err(Error::State("dataset is already normalized".into()));
        }
        let images = self.map_channels(stats, |v, m, s| (v - m) / if s > 0.0 { s } else { 1.0 })?;
        Ok(Dataset {
            images,
            norm: Some(stats.clone()),
            ..self.clone()
        })
    }

    pub fn denormalize(&self) -> Result<Dataset> {
        let stats = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::State("dataset is not normalized".into()))?;
        let images = self.map_channels(stats, |v, m, s| v * if s > 0.0 { s } else { 1.0 } + m)?;
        Ok(Dataset {
            images,
            norm: None,
            ..self.clone()
        })
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            detail: format!("truncated header: missing {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            detail: format!("truncated payload: expected {len} bytes from offset {start}"),
        });
    }
    if bytes.len() > start + len {
        return Err(Error::Parse {
            offset: (start + len) as u64,
            detail: format!("{} trailing bytes", bytes.len() - start - len),
        });
    }
    Ok(&bytes[start..])
}

/// IDX image archive as `[n, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let pixels = payload(bytes, 16, n * rows * cols)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&l| l as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(10, |&m| (m + 1).max(10))
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let x = parse_idx_images(&read(images)?)?;
    let y = parse_idx_labels(&read(labels)?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("{} images but {} labels", x.shape()[0], y.len()),
        });
    }
    let classes = class_count(&y);
    Dataset::new(x, y, classes, split)
}

/// CIFAR-10 binary records: one label byte then 3072 channel-major pixels.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            detail: "empty CIFAR batch".into(),
        });
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Parse {
            offset: whole as u64,
            detail: format!(
                "size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub fn load_cifar_bin(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR batch files given".into()));
    }
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let (x, y) = parse_cifar(&read(p)?).map_err(|e| match e {
            Error::Parse { offset, detail } => Error::Parse {
                offset,
                detail: format!("{}: {detail}", p.display()),
            },
            other => other,
        })?;
        parts.push(x);
        labels.extend(y);
    }
    let classes = class_count(&labels);
    Dataset::new(Tensor::concat_rows(&parts)?, labels, classes, split)
}

/// Deterministic synthetic classification data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Per-sample shape, `[c, h, w]` or `[features]`.
    pub shape: Vec<usize>,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Gaussian blobs per channel in each class prototype.
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    pub seed: u64,
}

fn default_blobs() -> usize {
    2
}

/// Class prototypes are sums of Gaussian blobs (random centers, widths and
/// amplitudes per channel) drawn from `seed`; samples add Gaussian noise and
/// clamp to `[0, 1]`. Train and test splits share prototypes and use
/// different noise streams. Labels cycle `0, 1, …, classes − 1`.
pub fn synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if spec.per_class == 0 || spec.shape.is_empty() || spec.shape.contains(&0) {
        return Err(Error::InvalidArgument("synthetic data needs a nonzero size".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let (c, h, w) = match spec.shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [f] => (1, 1, *f),
        other => {
            return Err(Error::InvalidArgument(format!(
                "synthetic shape must be [c, h, w] or [features], got {other:?}"
            )))
        }
    };
    let per_sample = c * h * w;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut p = vec![0.0; per_sample];
            for ch in 0..c {
                for _ in 0..spec.blobs.max(1) {
                    let cy = proto_rng.random_range(0.0..h as f64);
                    let cx = proto_rng.random_range(0.0..w as f64);
                    let width = proto_rng.random_range(0.6..1.0) * (h.max(w) as f64 / 3.0).max(0.5);
                    let amp = proto_rng.random_range(0.5..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            p[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            for v in &mut p {
                *v = v.min(1.0);
            }
            p
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * per_sample);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        for &v in &prototypes[k] {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            data.push((v + spec.noise * z).clamp(0.0, 1.0));
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.shape);
    Dataset::new(Tensor::new(shape, data)?, labels, spec.classes, split)
}

/// Indices of a class-balanced subsample: `⌊fraction·n_k⌋` per class drawn
/// without replacement, then shuffled together.
pub fn balanced_indices(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::new();
    for (k, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let take = (fraction * idx.len() as f64).floor() as usize;
        if take == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} keeps no sample of class {k} ({} available)",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..take]);
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

pub fn balanced_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    ds.select(&balanced_indices(ds, fraction, seed)?)
}
