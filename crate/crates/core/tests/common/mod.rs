#![allow(dead_code)]

use std::path::{Path, PathBuf};

use znl::data::cifar;
use znl::harness::ExperimentConfig;
use znl::rng::{self, Stream};

pub fn spirals_config(out: &Path, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        n: 400,
        batch_size: 32,
        epochs,
        probe_every: 3,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

/// Class-conditional 32×32 RGB images in the CIFAR-10 binary layout, split
/// over the five training batch files. Each class has its own tint and an
/// oriented grating; phase and pixel noise vary per image.
pub fn write_cifar_like(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = rng::stream(seed, Stream::Data);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let angle = std::f64::consts::PI * class as f64 / 10.0;
        let freq = 0.35 + 0.05 * (class % 3) as f64;
        let phase = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
        let mut pixels = Vec::with_capacity(cifar::PIXELS);
        for c in 0..3 {
            let tint = 12.0 * (((class + c) % 3) as f64 - 1.0);
            for y in 0..cifar::SIDE {
                for x in 0..cifar::SIDE {
                    let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                    let v = 128.0 + tint + 20.0 * (freq * u + phase).sin() + 60.0 * rng::normal(&mut r);
                    pixels.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        records.push(cifar::encode_record(class as u8, &pixels));
    }
    let files = cifar::train_files(dir);
    let per_file = n.div_ceil(files.len());
    for (k, path) in files.iter().enumerate() {
        let bytes: Vec<u8> = records.iter().skip(k * per_file).take(per_file).flatten().copied().collect();
        std::fs::write(path, bytes).unwrap();
    }
    files
}

/// Medians of every window of three consecutive values.
pub fn window_medians(values: &[f64]) -> Vec<f64> {
    values
        .windows(3)
        .map(|w| {
            let mut s = w.to_vec();
            s.sort_by(f64::total_cmp);
            s[1]
        })
        .collect()
}

pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}
