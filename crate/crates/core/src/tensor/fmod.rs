//! FMOD weight container: a small binary format for named f64 tensors.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic   "FMOD" (4 bytes)
//! version u32 = 1
//! count   u32
//! then per tensor, in map iteration (sorted name) order:
//!   name_len u32, name bytes (UTF-8),
//!   rank     u32, dims (rank x u32),
//!   values   product(dims) x f64 little-endian
//! ```
//!
//! Reading validates the magic, version, exact byte counts, and refuses
//! trailing bytes, so a truncated or concatenated file never loads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"FMOD";
const VERSION: u32 = 1;

fn fmt_err(path: &Path, message: impl Into<String>) -> TensorError {
    TensorError::WeightFormat { path: path.display().to_string(), message: message.into() }
}

fn io_err(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io { path: path.display().to_string(), source }
}

/// Serializes the map to `path`.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| fmt_err(path, "too many tensors for u32 count"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in tensors {
        let name_len = u32::try_from(name.len())
            .map_err(|_| fmt_err(path, format!("tensor name {name:?} too long")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u32::try_from(tensor.shape().len())
            .map_err(|_| fmt_err(path, format!("tensor {name} rank overflows u32")))?;
        buf.extend_from_slice(&rank.to_le_bytes());
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| fmt_err(path, format!("tensor {name} dimension {d} overflows u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            fmt_err(self.path, format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TensorError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Deserializes a tensor map from `path`.
pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>, TensorError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| fmt_err(path, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| fmt_err(path, format!("tensor {name} element count overflows")))?;
            shape.push(d);
        }
        let raw = r.take(len * 8, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|_| fmt_err(path, format!("tensor {name} shape/value mismatch")))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(fmt_err(path, format!("duplicate tensor name {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(path, format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}
