//! The `ATNP` binary tensor format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"ATNP" | u32 version (=1) | u32 ndim | ndim × u32 dims | numel × f64
//! ```
//!
//! Values are row-major. Used for feature maps, parameters and heatmaps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result, Shape};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"ATNP";
pub const VERSION: u32 = 1;

/// An n-dimensional `f64` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape(dims);
        if shape.dims().contains(&0) {
            return Err(Error::Invalid(format!("tensor dims must be positive, got {shape}")));
        }
        if shape.numel() != data.len() {
            return Err(Error::shape("Tensor::new", shape.dims(), &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            shape: m.shape(),
            data: m.data().to_vec(),
        }
    }

    /// A 1-D tensor holding the entries of a vector.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: Shape(vec![values.len()]),
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets the tensor as a matrix: 2-D as is, 1-D as a column.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match *self.dims() {
            [n] => Matrix::new(n, 1, self.data.clone()),
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(Error::Format(format!(
                "expected a 1-D or 2-D tensor, got {}",
                self.shape
            ))),
        }
    }

    /// Splits the leading axis: a `[m, d1, d2, ...]` tensor becomes `m`
    /// row-major slices of `d1·d2·…` values each.
    pub fn outer_slices(&self) -> impl Iterator<Item = &[f64]> {
        let inner = self.dims()[1..].iter().product::<usize>();
        self.data.chunks(inner.max(1))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.ndim() + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.ndim() as u32).to_le_bytes());
        for &d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an ATNP file".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported ATNP version {version} (expected {VERSION})"
            )));
        }
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let payload = cur.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("ATNP dims overflow".into()))?,
        )?;
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after ATNP payload",
                bytes.len() - cur.pos
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<reader>", e))?;
        Tensor::decode(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated ATNP data: needed {len} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], &[0x41, 0x54, 0x4E, 0x50]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 16);
    }

    #[test]
    fn rejects_truncation_version_and_magic() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]);
        let bytes = t.encode();
        assert!(matches!(
            Tensor::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Tensor::decode(&v2).unwrap_err().to_string().contains("version"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Tensor::decode(&long).is_err());
    }

    #[test]
    fn vector_loads_as_column() {
        let m = Tensor::vector(&[1.0, 2.0]).to_matrix().unwrap();
        assert_eq!(m.dims(), [2, 1]);
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_byte_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let numel: usize = dims.iter().product();
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f64> = (0..numel).map(|_| rng.normal() * 1e3).collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = t.encode();
            let back = Tensor::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
