//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "ZNL1"
//! precision  1 byte   4 (f32) or 8 (f64)
//! then, per tensor, until end of file:
//!   path_len  u32 LE
//!   path      path_len bytes, UTF-8
//!   rank      u32 LE
//!   extents   rank x u32 LE
//!   values    product(extents) little-endian floats of the header precision
//! ```
//!
//! Parameters come first in network order, then batch-norm running
//! statistics.

use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ZNL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    /// `(path, shape, values)` in file order.
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + params.numel() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.push(T::PRECISION.bytes() as u8);
    let tensors = params
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(params.buffers());
    for (path, t) in tensors {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected ZNL1".into()));
    }
    let precision = match r.take(1)?[0] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(Error::Checkpoint(format!("unknown precision flag {other}"))),
    };
    let width = precision.bytes();
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let values = raw
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => f32::read_le(c).as_f64(),
                Precision::F64 => f64::read_le(c),
            })
            .collect();
        entries.push((path, shape, values));
    }
    Ok(Checkpoint { precision, entries })
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

impl<T: Scalar> ParamStore<T> {
    /// Overwrites values and running statistics from a checkpoint whose
    /// entries all exist here with matching shapes.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (path, shape, values) in &ckpt.entries {
            let t = Tensor::new(shape.clone(), values.iter().map(|&v| T::of(v)).collect())?;
            if self.get(path).is_ok() {
                self.set_value(path, t)?;
            } else {
                self.set_buffer(path, t)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Preset;

    #[test]
    fn header_layout() {
        let net = Preset::ResMlpS.build(&[2], 2).unwrap();
        let store = ParamStore::<f32>::init(&net, 1);
        let bytes = encode(&store);
        assert_eq!(&bytes[..4], b"ZNL1");
        assert_eq!(bytes[4], 4);
        // first record: "stem.weight", rank 2, [128, 2]
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 11);
        assert_eq!(&bytes[9..20], b"stem.weight");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 128);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 2);
        let first = store.value("stem.weight").unwrap().data()[0];
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), first);
    }

    #[test]
    fn round_trip_restores_everything() {
        let net = Preset::ResNet8.build(&[3, 8, 8], 10).unwrap();
        let store = ParamStore::<f64>::init(&net, 3);
        let ckpt = decode(&encode(&store)).unwrap();
        assert_eq!(ckpt.precision, Precision::F64);
        let mut other = ParamStore::<f64>::init(&net, 4);
        other.restore(&ckpt).unwrap();
        for (a, b) in store.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(store.buffers().eq(other.buffers()));
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(b"ZNL0\x04").is_err());
        assert!(decode(b"ZNL1\x03").is_err());
        let net = Preset::ResMlpS.build(&[2], 2).unwrap();
        let bytes = encode(&ParamStore::<f32>::init(&net, 1));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
