//! The `.tns` tensor file format.
//!
//! Layout: 8-byte magic `TNSR0001`, `u32` LE rank, `rank` × `u32` LE dims,
//! one `u8` dtype code, then the row-major little-endian payload.
//! Dtype codes: 0 = float32, 1 = int32, 2 = float64 (checkpoints).

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TNSR0001";

#[derive(Clone, Debug, PartialEq)]
pub enum TnsData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl TnsData {
    fn len(&self) -> usize {
        match self {
            TnsData::F32(v) => v.len(),
            TnsData::I32(v) => v.len(),
            TnsData::F64(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            TnsData::F32(_) => 0,
            TnsData::I32(_) => 1,
            TnsData::F64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TnsArray {
    pub shape: Vec<usize>,
    pub data: TnsData,
}

impl TnsArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: TnsData::F32(data),
        }
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self {
            shape,
            data: TnsData::I32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: TnsData::F64(data),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(self.shape.iter().product::<usize>(), self.data.len());
        let mut out = Vec::with_capacity(13 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.data.code());
        match &self.data {
            TnsData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TnsData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TnsData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a buffer; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::format(path, m);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(err("bad magic bytes (expected TNSR0001)".into()));
        }
        let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = 12 + 4 * rank + 1;
        if bytes.len() < header {
            return Err(err(format!("truncated header for rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let code = bytes[header - 1];
        let width = match code {
            0 | 1 => 4,
            2 => 8,
            c => return Err(err(format!("unknown dtype code {c}"))),
        };
        let payload = &bytes[header..];
        if payload.len() != count * width {
            return Err(err(format!(
                "payload has {} bytes but header shape {shape:?} needs {}",
                payload.len(),
                count * width
            )));
        }
        let data = match code {
            0 => TnsData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => TnsData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TnsData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_f32(self, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TnsData::F32(v) => Ok((self.shape, v)),
            _ => Err(Error::format(path, "expected float32 payload")),
        }
    }

    pub fn into_i32(self, path: &Path) -> Result<(Vec<usize>, Vec<i32>)> {
        match self.data {
            TnsData::I32(v) => Ok((self.shape, v)),
            _ => Err(Error::format(path, "expected int32 payload")),
        }
    }

    pub fn into_f64(self, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            TnsData::F64(v) => Ok((self.shape, v)),
            TnsData::F32(v) => Ok((self.shape, v.into_iter().map(f64::from).collect())),
            _ => Err(Error::format(path, "expected floating point payload")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = TnsArray::f32(vec![4, 3, 32, 32], vec![0.5; 4 * 3 * 32 * 32]);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..8], b"TNSR0001");
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &4u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &32u32.to_le_bytes());
        assert_eq!(bytes[28], 0);
        assert_eq!(bytes.len(), 29 + 4 * 4 * 3 * 32 * 32);
        let back = TnsArray::from_bytes(&bytes, Path::new("x.tns")).unwrap();
        assert_eq!(back.shape, vec![4, 3, 32, 32]);
    }

    #[test]
    fn corrupt_magic_names_file() {
        let mut bytes = TnsArray::i32(vec![2], vec![1, 2]).to_bytes();
        bytes[0] = b'X';
        let err = TnsArray::from_bytes(&bytes, Path::new("semantic.tns")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("semantic.tns") && msg.contains("magic"), "{msg}");
    }

    #[test]
    fn payload_shape_mismatch() {
        let mut bytes = TnsArray::i32(vec![3], vec![1, 2, 3]).to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            TnsArray::from_bytes(&bytes, Path::new("a.tns")),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let vals: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let a = TnsArray::f32(dims.clone(), vals);
            let b = TnsArray::from_bytes(&a.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }
}
