//! Lossless tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STEM" | version: u32 = 1 | dtype: u32 (1 = f32) | ndim: u32 | dims: u64 * ndim | payload
//! ```
//!
//! The payload is the row-major `f32` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::Latent;

pub const MAGIC: &[u8; 4] = b"STEM";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

pub fn encode_tensor(x: &Latent) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * x.shape().len() + 4 * x.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(x.shape().len() as u32).to_le_bytes());
    for &d in x.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Latent> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Container("magic mismatch".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let dtype = cur.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Container(format!("unsupported dtype code {dtype}")));
    }
    let ndim = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let d = cur.u64()?;
        shape.push(
            usize::try_from(d).map_err(|_| Error::Container(format!("dimension {d} too large")))?,
        );
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Container("element count overflows".into()))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::Container("payload size overflows".into()))?;
    let payload = cur.take(payload_len)?;
    if cur.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Latent::new(shape, data)
}

pub fn write_tensor(x: &Latent, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(x)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Container(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
