//! Versioned binary parameter checkpoints.
//!
//! Layout, all integers u64 little-endian:
//!
//! ```text
//! "HDV1"
//! repeated until EOF:
//!     name_len, name bytes (UTF-8), rank, dims[rank], f64 LE values[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDV1";

const MAX_RANK: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing HDV1 magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u64("name length")?;
        if name_len > r.remaining() as u64 {
            return Err(Error::Checkpoint(format!("name length {name_len} exceeds input")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` element count overflows")))?;
            shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("dimension too large".into()))?);
        }
        let bytes_needed = numel
            .checked_mul(8)
            .filter(|&n| n <= r.remaining() as u64)
            .ok_or_else(|| Error::Checkpoint(format!("truncated values of `{name}`")))?;
        let raw = r.take(bytes_needed as usize, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode_checkpoint(entries);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes)
}
