//! IDX files as used by MNIST: a big-endian magic `0x000008DD` (unsigned
//! bytes, `DD` dimensions), one big-endian u32 per dimension, then the raw
//! bytes.

use std::path::Path;

use super::{read_file, DatasetSplit};
use crate::error::{DataError, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Checks magic and length; returns the dimensions and the payload.
fn parse<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        }
        .into());
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        }
        .into());
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        }
        .into());
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header + payload,
            found: bytes.len(),
        }
        .into());
    }
    if dims.contains(&0) {
        return Err(DataError::Empty { path: path.into() }.into());
    }
    Ok((dims, &bytes[header..]))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    decode_mnist(images_path, &image_bytes, labels_path, &label_bytes)
}

/// Parses in-memory IDX images and labels; paths are used in errors only.
pub fn decode_mnist(
    images_path: &Path,
    images: &[u8],
    labels_path: &Path,
    labels: &[u8],
) -> Result<DatasetSplit> {
    let (dims, pixels) = parse(images_path, images, IMAGES_MAGIC)?;
    let (ldims, label_bytes) = parse(labels_path, labels, LABELS_MAGIC)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ldims[0],
        }
        .into());
    }
    if let Some((record, &label)) = label_bytes.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::BadLabel {
            path: labels_path.into(),
            record,
            label,
        }
        .into());
    }
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = Tensor::new([n, 1, rows, cols], data)?;
    let labels = label_bytes.iter().map(|&l| usize::from(l)).collect();
    DatasetSplit::new("mnist", images, labels, 10)
}

/// IDX image file for `n` images of `rows × cols` bytes each.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols, "pixel count");
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn fixture() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        (encode_images(2, 28, 28, &pixels), encode_labels(&[3, 9]), pixels)
    }

    fn decode(images: &[u8], labels: &[u8]) -> Result<DatasetSplit> {
        decode_mnist(Path::new("img"), images, Path::new("lbl"), labels)
    }

    fn data_err(r: Result<DatasetSplit>) -> DataError {
        match r {
            Err(Error::Data(e)) => e,
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let (img, lbl, _) = fixture();
        assert_eq!(&img[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        assert_eq!(&lbl[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
    }

    #[test]
    fn round_trip() {
        let (img, lbl, pixels) = fixture();
        let split = decode(&img, &lbl).unwrap();
        assert_eq!(split.images.shape(), &[2, 1, 28, 28]);
        assert_eq!(split.labels, vec![3, 9]);
        let back: Vec<u8> = split.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        assert_eq!(split.images.data()[1], 7.0 / 255.0);
    }

    #[test]
    fn malformed_files() {
        let (img, lbl, _) = fixture();
        assert!(matches!(data_err(decode(&img, &img)), DataError::BadMagic { found: 0x803, .. }));
        assert!(matches!(data_err(decode(&lbl, &lbl)), DataError::BadMagic { expected: 0x803, .. }));
        assert!(matches!(
            data_err(decode(&img[..img.len() - 1], &lbl)),
            DataError::Truncated { .. }
        ));
        assert!(matches!(data_err(decode(&img[..10], &lbl)), DataError::Truncated { .. }));
        assert!(matches!(
            data_err(decode(&img, &encode_labels(&[1, 2, 3]))),
            DataError::CountMismatch { images: 2, labels: 3 }
        ));
        assert!(matches!(
            data_err(decode(&img, &encode_labels(&[1, 12]))),
            DataError::BadLabel { record: 1, label: 12, .. }
        ));
        assert!(matches!(
            data_err(decode(&encode_images(0, 28, 28, &[]), &encode_labels(&[]))),
            DataError::Empty { .. }
        ));
    }
}
