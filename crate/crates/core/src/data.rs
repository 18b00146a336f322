//! Datasets: the CIFAR-10 binary format, synthetic blobs and augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.shape().batch() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.shape().batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!(
                "label {bad} is not below the class count {classes}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Shape {
        let s = self.images.shape();
        Shape::new(1, s.height(), s.width(), s.channels())
    }

    /// Images at `indices`, stacked in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_shape().numel();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let s = self.sample_shape();
        let shape = Shape::new(indices.len(), s.height(), s.width(), s.channels());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(shape, data).expect("gathered length matches"),
            labels,
        )
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.images.shape().channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for px in self.images.data().chunks_exact(c) {
            for (k, &v) in px.iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
        let n = self.images.shape().positions() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        (mean, std)
    }

    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        let c = self.images.shape().channels();
        for px in self.images.data_mut().chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = ((*v as f64 - mean[k]) / std[k]) as f32;
            }
        }
    }
}

/// Raw records of one binary batch file: channels-last bytes and labels.
pub fn load_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_cifar_records(&bytes).map_err(|reason| Error::Format {
        path: path.to_owned(),
        reason,
    })
}

fn parse_cifar_records(bytes: &[u8]) -> std::result::Result<(Vec<u8>, Vec<usize>), String> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format!(
            "truncated record: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record size",
            bytes.len()
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = vec![0u8; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(format!(
                "record {r} has label {label}, expected 0..{CIFAR_CLASSES}"
            ));
        }
        labels.push(label);
        let out = &mut pixels[r * 3 * plane..(r + 1) * 3 * plane];
        for c in 0..3 {
            for p in 0..plane {
                out[p * 3 + c] = rec[1 + c * plane + p];
            }
        }
    }
    Ok((pixels, labels))
}

fn cifar_dataset(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = load_cifar_batch(f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let shape = Shape::new(labels.len(), CIFAR_SIDE, CIFAR_SIDE, 3);
    let images = Tensor::from_vec(
        shape,
        pixels.into_iter().map(|b| b as f32 / 255.0).collect(),
    )?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Loads the five training batches and the test batch from `dir`,
/// normalized by the training split's per-channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_owned(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset directory not found",
            ),
        });
    }
    let train_files: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let mut train = cifar_dataset(&train_files, Split::Train)?;
    let mut test = cifar_dataset(&[dir.join(CIFAR_TEST_FILE)], Split::Test)?;
    let (mean, std) = train.channel_stats();
    train.normalize(&mean, &std);
    test.normalize(&mean, &std);
    Ok((train, test))
}

/// Class-conditional Gaussian blobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    /// Seed of the per-class mean images, shared by every split.
    pub mean_seed: u64,
    /// Scale of the class means.
    pub signal: f32,
    /// Standard deviation of the per-pixel noise.
    pub noise: f32,
}

impl SynthConfig {
    pub fn new(n: usize, classes: usize, size: usize, channels: usize) -> Self {
        SynthConfig {
            n,
            classes,
            size,
            channels,
            mean_seed: 0x5eed,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

/// Class mean images, `[classes, size, size, channels]`.
pub fn synth_means(cfg: &SynthConfig) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mean_seed);
    Tensor::from_fn(
        Shape::new(cfg.classes, cfg.size, cfg.size, cfg.channels),
        |_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            cfg.signal * z
        },
    )
}

/// Stratified blobs: sample `i` has label `i mod classes`.
pub fn synth_dataset_with(seed: u64, cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    if cfg.classes == 0 {
        return Err(Error::Config("at least one class is required".into()));
    }
    let means = synth_means(cfg);
    let per = cfg.size * cfg.size * cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(cfg.n * per);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let label = i % cfg.classes;
        let mean = &means.data()[label * per..(label + 1) * per];
        data.extend(mean.iter().map(|&m| {
            let z: f32 = StandardNormal.sample(&mut rng);
            m + cfg.noise * z
        }));
        labels.push(label);
    }
    let images = Tensor::from_vec(Shape::new(cfg.n, cfg.size, cfg.size, cfg.channels), data)?;
    Dataset::new(images, labels, cfg.classes, split)
}

pub fn synth_dataset(
    seed: u64,
    n: usize,
    classes: usize,
    size: usize,
    channels: usize,
) -> Result<Dataset> {
    synth_dataset_with(
        seed,
        &SynthConfig::new(n, classes, size, channels),
        Split::Train,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub enabled: bool,
    pub pad: usize,
    pub flip: bool,
}

impl Augment {
    pub const NONE: Augment = Augment {
        enabled: false,
        pad: 0,
        flip: false,
    };
    pub const STANDARD: Augment = Augment {
        enabled: true,
        pad: 4,
        flip: true,
    };
}

/// Zero-pads every sample, crops back to its size at a random offset and
/// mirrors it horizontally with probability one half.
pub fn augment<R: Rng + ?Sized>(images: &Tensor<f32>, cfg: Augment, rng: &mut R) -> Tensor<f32> {
    if !cfg.enabled {
        return images.clone();
    }
    let s = images.shape();
    let (h, w) = (s.height(), s.width());
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch() {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        let flip = cfg.flip && rng.random_bool(0.5);
        for y in 0..h {
            let sy = (y + dy).checked_sub(cfg.pad).filter(|&v| v < h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx).checked_sub(cfg.pad).filter(|&v| v < w);
                if let (Some(sy), Some(sx)) = (sy, sx) {
                    for c in 0..s.channels() {
                        *out.at_mut(b, y, x, c) = images.at(b, sy, sx, c);
                    }
                }
            }
        }
    }
    out
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_arithmetic() {
        let mut bytes = vec![0u8; CIFAR_RECORD * 3];
        bytes[CIFAR_RECORD] = 7;
        bytes[CIFAR_RECORD + 1] = 9;
        let (px, labels) = parse_cifar_records(&bytes).unwrap();
        assert_eq!(labels, vec![0, 7, 0]);
        assert_eq!(px.len(), 3 * 3072);
        assert_eq!(px[3072], 9);
        assert!(parse_cifar_records(&bytes[..3072])
            .unwrap_err()
            .contains("truncated"));
    }

    #[test]
    fn planar_to_channels_last() {
        let mut rec = vec![1u8];
        rec.extend(std::iter::repeat_n(10u8, 1024));
        rec.extend(std::iter::repeat_n(20u8, 1024));
        rec.extend(std::iter::repeat_n(30u8, 1024));
        let (px, _) = parse_cifar_records(&rec).unwrap();
        assert_eq!(&px[..6], &[10, 20, 30, 10, 20, 30]);
    }

    #[test]
    fn bad_label() {
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(parse_cifar_records(&bytes)
            .unwrap_err()
            .contains("label 10"));
    }

    #[test]
    fn stratified() {
        let d = synth_dataset(1, 1000, 10, 4, 3).unwrap();
        assert!(d.class_counts().iter().all(|&c| c == 100));
    }

    #[test]
    fn augmentation_off_is_identity() {
        let d = synth_dataset(2, 4, 2, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&d.images, Augment::NONE, &mut rng), d.images);
        assert_eq!(
            augment(&d.images, Augment::STANDARD, &mut rng).shape(),
            d.images.shape()
        );
    }
}
