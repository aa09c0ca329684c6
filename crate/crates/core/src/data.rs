//! Datasets: CIFAR-10 binary batches, class-per-directory image folders,
//! and small synthetic sets for tests and demos.

use std::fs;
use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(samples, channels, h, w)`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
    /// Per-channel constants applied by [`Dataset::normalize`]; empty until then.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, num_classes: usize, splits: Vec<Split>) -> Result<Self> {
        let n = images.dim().0;
        if labels.len() != n || splits.len() != n {
            return Err(Error::Data(format!(
                "{n} images, {} labels, {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            splits,
            mean: Vec::new(),
            std: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        (
            self.images.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn split(&self, split: Split) -> (Array4<f64>, Vec<usize>) {
        self.gather(&self.indices(split))
    }

    /// Standardizes each channel with mean and std measured on the training
    /// split; the constants are kept for later inputs.
    pub fn normalize(&mut self) {
        let train = self.indices(Split::Train);
        let src = if train.is_empty() {
            (0..self.len()).collect()
        } else {
            train
        };
        let c = self.image_shape().0;
        let (mut mean, mut std) = (vec![0.0; c], vec![1.0; c]);
        for ch in 0..c {
            let vals: Vec<f64> = src
                .iter()
                .flat_map(|&i| self.images.slice(s![i, ch, .., ..]).iter().copied().collect::<Vec<_>>())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[ch] = m;
            std[ch] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        self.apply_normalization(&mean, &std);
        self.mean = mean;
        self.std = std;
    }

    fn apply_normalization(&mut self, mean: &[f64], std: &[f64]) {
        for (ch, (&m, &s)) in mean.iter().zip(std).enumerate() {
            self.images.slice_mut(s![.., ch, .., ..]).mapv_inplace(|x| (x - m) / s);
        }
    }

    /// Keeps at most the given number of samples of each split, chosen by
    /// seeded shuffle.
    pub fn subset(&self, train: usize, val: usize, test: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for (split, n) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
            let mut idx = self.indices(split);
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            keep.extend(idx);
        }
        keep.sort_unstable();
        let (images, labels) = self.gather(&keep);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
            splits: keep.iter().map(|&i| self.splits[i]).collect(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-planar
/// pixel bytes, scaled to `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Array4<f64>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Data(format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let images = Array4::from_shape_vec((n, 3, 32, 32), pixels).expect("record size checked");
    Ok((images, labels))
}

/// Loads `data_batch_{1..5}.bin` as training data, holding out the last
/// 10% of it for validation, and `test_batch.bin` as the test split. A
/// `cifar-10-batches-bin` subdirectory is looked through transparently.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested.as_path() } else { dir };
    let read = |name: &str| -> Result<(Array4<f64>, Vec<usize>)> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        parse_cifar_records(&bytes)
    };
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (x, y) = read(&format!("data_batch_{i}.bin"))?;
        parts.push(x);
        labels.extend(y);
    }
    let n_train = labels.len();
    let n_val = n_train / 10;
    let (tx, ty) = read("test_batch.bin")?;
    let n_test = ty.len();
    parts.push(tx);
    labels.extend(ty);
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let images = ndarray::concatenate(Axis(0), &views).expect("uniform record shape");
    let mut splits = vec![Split::Train; n_train - n_val];
    splits.extend(std::iter::repeat(Split::Val).take(n_val));
    splits.extend(std::iter::repeat(Split::Test).take(n_test));
    Dataset::new(images, labels, 10, splits)
}

/// Assigns 60/10/30 train/val/test tags to `n` samples by seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in idx.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

/// One subdirectory per class (sorted by name), every readable image
/// resized to `size x size` RGB in `[0, 1]`.
pub fn load_image_dir(dir: &Path, size: u32, seed: u64) -> Result<Dataset> {
    let mut classes: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", dir.display())));
    }
    let side = size as usize;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(class)
            .map_err(|e| Error::Data(format!("{}: {e}", class.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("{}: empty class", class.display())));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            let rgb = img
                .resize_exact(size, size, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let mut planar = vec![0.0; 3 * side * side];
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    planar[(ch * side + y as usize) * side + x as usize] = p[ch] as f64 / 255.0;
                }
            }
            pixels.extend(planar);
            labels.push(label);
        }
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, side, side), pixels).expect("sized above");
    Dataset::new(images, labels, classes.len(), assign_splits(n, seed))
}

/// Gaussian clusters around a random per-class template; learnable by a
/// small network. Splits follow [`assign_splits`].
pub fn synthetic(n: usize, shape: (usize, usize, usize), num_classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        pixels.extend(templates[label].iter().map(|&t| t + normal.sample(&mut rng)));
        labels.push(label);
    }
    let images = Array4::from_shape_vec((n, c, h, w), pixels).expect("sized above");
    Dataset::new(images, labels, num_classes, assign_splits(n, seed))
}
