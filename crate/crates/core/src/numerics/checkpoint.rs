//! Portable parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes   "SMB3"
//! version   u32       1
//! count     u64       number of entries
//! entry * count:
//!   path_len  u32
//!   path      path_len bytes, UTF-8
//!   rank      u32
//!   extents   u64 * rank
//!   values    f64 * product(extents), IEEE-754 little-endian
//! ```
//!
//! Entries are written in sorted path order. Trailing bytes are an error.

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMB3";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (path, t) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
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
            return Err(Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?).map_err(|_| Error::Format("parameter path is not UTF-8".into()))?.to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::Format(format!("implausible shape {shape:?} for '{path}'")))?;
        let raw = r.take(numel * 8, &path)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if store.insert(path.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate path '{path}'")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", buf.len() - r.pos)));
    }
    Ok(store)
}

/// Writes to a sibling temporary file and renames it over `path`, so a
/// crash never leaves a truncated checkpoint behind.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, to_bytes(store))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}
