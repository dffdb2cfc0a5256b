//! Two-class, two-dimensional tasks whose classes are not convex sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Turns of each spiral arm.
pub const SPIRAL_TURNS: f64 = 1.5;
/// Number of Gaussian blobs on the ring; classes alternate around it.
pub const RING_BLOBS: usize = 8;
pub const RING_BLOB_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    Spirals,
    RingGaussians,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Spirals => "spirals",
            SyntheticTask::RingGaussians => "ring-gaussians",
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spirals" => Ok(SyntheticTask::Spirals),
            "ring-gaussians" => Ok(SyntheticTask::RingGaussians),
            _ => Err(Error::Config(format!("unknown synthetic task `{s}`"))),
        }
    }
}

/// `n` points as `[n, 1, 1, 2]` features. Point `i` has class `i % 2`.
///
/// * spirals: radius `t`, angle `2π·turns·t + π·class`, with `t = √u` for
///   `u` uniform in `[0, 1)` (points spread evenly along the arm), then
///   isotropic Gaussian noise of std `noise`.
/// * ring-gaussians: blob `2k + class` (k uniform in `0..4`) centred on the
///   unit circle, std `RING_BLOB_STD + noise`.
pub fn synthetic_nonconvex(task: SyntheticTask, n: usize, noise: f64, seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n > 0".into()));
    }
    let mut r = rng::stream(seed, Stream::Data);
    let mut coords = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (x, y) = match task {
            SyntheticTask::Spirals => {
                let t = rng::unit(&mut r).sqrt();
                let angle = 2.0 * std::f64::consts::PI * SPIRAL_TURNS * t + std::f64::consts::PI * class as f64;
                let (nx, ny) = (rng::normal(&mut r), rng::normal(&mut r));
                (t * angle.cos() + noise * nx, t * angle.sin() + noise * ny)
            }
            SyntheticTask::RingGaussians => {
                let blob = 2 * rng::below(&mut r, RING_BLOBS / 2) + class;
                let angle = 2.0 * std::f64::consts::PI * blob as f64 / RING_BLOBS as f64;
                let spread = RING_BLOB_STD + noise;
                let (nx, ny) = (rng::normal(&mut r), rng::normal(&mut r));
                (angle.cos() + spread * nx, angle.sin() + spread * ny)
            }
        };
        coords.push(x as f32);
        coords.push(y as f32);
        labels.push(class);
    }
    let images = Tensor::new([n, 1, 1, 2], coords)?;
    DatasetSplit::new(task.name(), images, labels, 2)
}
