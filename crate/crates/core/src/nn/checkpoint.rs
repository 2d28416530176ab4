//! Flat binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ARTNCKPT"
//! version  u32      1
//! count    u32      number of tensors
//! count × {
//!     name_len u32
//!     name     name_len bytes, UTF-8
//!     rank     u32
//!     dims     rank × u64
//!     payload  product(dims) × f64
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARTNCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    buf
}

/// Writes atomically via a sibling temporary file.
pub fn write_checkpoint<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(tensors)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<S>)>, String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension overflow")?;
        let raw = c.take(n.checked_mul(8).ok_or("dimension overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| S::of(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(out)
}
