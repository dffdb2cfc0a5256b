//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes, the red, green and blue 32×32 planes in turn.

use std::path::{Path, PathBuf};

use super::{read_file, DatasetSplit};
use crate::error::{DataError, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;

/// Standard training batch file names inside a CIFAR-10 directory.
pub fn train_files(dir: &Path) -> Vec<PathBuf> {
    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
}

pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<DatasetSplit> {
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        files.push((p.as_ref().to_path_buf(), read_file(p.as_ref())?));
    }
    decode_cifar10(files.iter().map(|(p, b)| (p.as_path(), b.as_slice())))
}

/// Parses in-memory batch files in order.
pub fn decode_cifar10<'a>(files: impl IntoIterator<Item = (&'a Path, &'a [u8])>) -> Result<DatasetSplit> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut last = PathBuf::new();
    for (path, bytes) in files {
        last = path.to_path_buf();
        if bytes.len() % RECORD != 0 {
            return Err(DataError::SizeNotMultiple {
                path: path.into(),
                size: bytes.len(),
                record: RECORD,
            }
            .into());
        }
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(DataError::BadLabel {
                    path: path.into(),
                    record: i,
                    label: rec[0],
                }
                .into());
            }
            labels.push(usize::from(rec[0]));
            pixels.extend(rec[1..].iter().map(|&p| f32::from(p) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty { path: last }.into());
    }
    let images = Tensor::new([labels.len(), 3, SIDE, SIDE], pixels)?;
    DatasetSplit::new("cifar10", images, labels, 10)
}

/// One record: the label byte then the planar pixels.
pub fn encode_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), PIXELS, "pixel count");
    let mut out = Vec::with_capacity(RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn decode_one(bytes: &[u8]) -> Result<DatasetSplit> {
        decode_cifar10([(Path::new("batch.bin"), bytes)])
    }

    #[test]
    fn one_record_round_trip() {
        let pixels: Vec<u8> = (0..PIXELS).map(|i| (i % 251) as u8).collect();
        let split = decode_one(&encode_record(6, &pixels)).unwrap();
        assert_eq!(split.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(split.labels, vec![6]);
        // green plane, row 2, column 5
        let idx = SIDE * SIDE + 2 * SIDE + 5;
        assert_eq!(split.images.data()[idx], f32::from(pixels[idx]) / 255.0);
        let back: Vec<u8> = split.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn record_count_follows_file_size() {
        let mut bytes = Vec::new();
        for i in 0..7u8 {
            bytes.extend(encode_record(i % 10, &[i; PIXELS]));
        }
        let split = decode_one(&bytes).unwrap();
        assert_eq!(split.len(), bytes.len() / RECORD);
        let two = decode_cifar10([(Path::new("a"), &bytes[..]), (Path::new("b"), &bytes[..RECORD])]).unwrap();
        assert_eq!(two.len(), 8);
    }

    #[test]
    fn malformed_files() {
        let err = decode_one(&[0u8; PIXELS]).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::SizeNotMultiple { size: 3072, record: 3073, .. })));
        let err = decode_one(&encode_record(10, &[0; PIXELS])).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::BadLabel { label: 10, record: 0, .. })));
        assert!(matches!(decode_one(&[]), Err(Error::Data(DataError::Empty { .. }))));
    }
}
