//! `UCAP1` checkpoint encoding.
//!
//! Layout, all integers u64 little-endian: magic `UCAP1`, entry count, then
//! per entry the name length, UTF-8 name bytes, rank, each dimension, and the
//! f64 little-endian data.

use alloc::string::String;
use alloc::vec::Vec;

use super::tensor::{ModelParams, Tensor};
use super::AutodiffError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UCAP1";

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(AutodiffError::Checkpoint("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, AutodiffError> {
        usize::try_from(self.u64()?).map_err(|_| AutodiffError::Checkpoint("length overflows usize"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic"));
    }
    let count = r.usize()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| AutodiffError::Checkpoint("entry name is not UTF-8"))?
            .into();
        let rank = r.usize()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(AutodiffError::Checkpoint("shape overflows usize"))?;
        let raw = r.take(n.checked_mul(8).ok_or(AutodiffError::Checkpoint("shape overflows usize"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes after last entry"));
    }
    Ok(out)
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_checkpoint(self.iter().map(|(_, n, t)| (n, t)))
    }

    /// Overwrites every entry named in the checkpoint. Entries must already
    /// exist with the same shape; entries absent from the checkpoint keep
    /// their values.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<usize, AutodiffError> {
        let entries = decode_checkpoint(bytes)?;
        let n = entries.len();
        for (name, t) in entries {
            self.assign(&name, t)?;
        }
        Ok(n)
    }
}
