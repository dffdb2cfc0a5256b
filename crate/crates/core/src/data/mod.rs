//! Dataset parsers, synthetic tasks, standardization and batching.

pub mod cifar;
pub mod idx;
pub mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cifar::load_cifar10_bin;
pub use idx::load_mnist_idx;
pub use synthetic::{synthetic_nonconvex, SyntheticTask};

use crate::error::{DataError, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        DataError::Io {
            path: path.into(),
            source,
        }
        .into()
    })
}

/// Images `[N, C, H, W]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be [N, C, H, W]".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            }
            .into());
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(DatasetSplit {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `indices`, in that order, at precision `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend(self.images.data()[i * len..(i + 1) * len].iter().map(|&v| T::of(f64::from(v))));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    fn select(&self, range: std::ops::Range<usize>) -> Result<DatasetSplit> {
        let len = self.sample_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = range.len();
        let images = Tensor::new(shape, self.images.data()[range.start * len..range.end * len].to_vec())?;
        DatasetSplit::new(self.name.clone(), images, self.labels[range].to_vec(), self.classes)
    }

    /// The first `limit` samples (all of them if fewer).
    pub fn take(&self, limit: usize) -> Result<DatasetSplit> {
        self.select(0..limit.min(self.len()).max(1))
    }

    /// Splits off the last `⌊len/10⌋` samples, in stored order, as a
    /// validation set. `None` when that would be empty.
    pub fn split_validation(&self) -> Result<(DatasetSplit, Option<DatasetSplit>)> {
        let val = self.len() / 10;
        if val == 0 {
            return Ok((self.clone(), None));
        }
        let cut = self.len() - val;
        Ok((self.select(0..cut)?, Some(self.select(cut..self.len())?)))
    }
}

/// Per-channel affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population std; a constant channel is recorded as 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(split: &DatasetSplit) -> Standardizer {
        let shape = split.images.shape();
        let (n, c) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        let data = split.images.data();
        let channel = |k: usize| {
            (0..n).flat_map(move |i| {
                let start = (i * c + k) * plane;
                data[start..start + plane].iter().map(|&v| f64::from(v))
            })
        };
        let count = (n * plane) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for k in 0..c {
            let mu = channel(k).sum::<f64>() / count;
            let var = channel(k).map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, split: &DatasetSplit) -> Result<DatasetSplit> {
        let shape = split.images.shape();
        if shape[1] != self.mean.len() {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![self.mean.len()],
            });
        }
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let data = split
            .images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / plane) % c;
                ((f64::from(v) - self.mean[k]) / self.std[k]) as f32
            })
            .collect();
        DatasetSplit::new(
            split.name.clone(),
            Tensor::new(shape.to_vec(), data)?,
            split.labels.clone(),
            split.classes,
        )
    }
}

/// Sample indices for one epoch: a Fisher–Yates permutation of `0..n`
/// drawn from the `(seed, epoch)` shuffle stream, cut into batches of
/// `batch_size` with the final partial batch kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, Stream::Shuffle { epoch }), &mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
