//! MD3C checkpoint files.
//!
//! Layout: magic `MD3C`, `u16` version, `u64` header length, UTF-8 JSON
//! header `{entries: [{name, dtype, shape, offset}], meta}`, then the raw
//! little-endian payloads in header order. Offsets count from the first
//! payload byte.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MD3C_MAGIC: &[u8; 4] = b"MD3C";
pub const MD3C_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor),
    F64(Tensor),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U8(_) => "u8",
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Payload::F32(t) | Payload::F64(t) => t.shape().to_vec(),
            Payload::U8(b) => vec![b.len()],
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F32(t) => 4 * t.numel(),
            Payload::F64(t) => 8 * t.numel(),
            Payload::U8(b) => b.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(t) => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Payload::F64(t) => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::U8(b) => out.extend_from_slice(b),
        }
    }

    pub fn tensor(&self) -> Option<&Tensor> {
        match self {
            Payload::F32(t) | Payload::F64(t) => Some(t),
            Payload::U8(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    meta: serde_json::Value,
}

/// Named payloads plus free-form metadata, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Payload)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, p: Payload) {
        self.entries.push((name.into(), p));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, p)| {
                let e = EntryHeader {
                    name: name.clone(),
                    dtype: p.dtype().into(),
                    shape: p.shape(),
                    offset,
                };
                offset += p.byte_len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { entries, meta: self.meta.clone() })?;
        let mut out = Vec::with_capacity(14 + header.len() + offset as usize);
        out.extend_from_slice(MD3C_MAGIC);
        out.extend_from_slice(&MD3C_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in &self.entries {
            p.write(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(path, m);
        if b.len() < 14 || &b[..4] != MD3C_MAGIC {
            return Err(fail("not an MD3C checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != MD3C_VERSION {
            return Err(fail(format!("unsupported MD3C version {version}")));
        }
        let hlen = u64::from_le_bytes(b[6..14].try_into().unwrap()) as usize;
        let body_start = 14usize.checked_add(hlen).filter(|&e| e <= b.len()).ok_or_else(|| fail("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&b[14..body_start]).map_err(|e| fail(format!("bad header: {e}")))?;
        let body = &b[body_start..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                "u8" => 1,
                other => return Err(fail(format!("entry {}: unknown dtype {other}", e.name))),
            };
            let start = e.offset as usize;
            let end = start + n * width;
            if end > body.len() {
                return Err(fail(format!("entry {} runs past the end of the file", e.name)));
            }
            let raw = &body[start..end];
            let p = match width {
                4 => Payload::F32(Tensor::new(
                    e.shape,
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                )?),
                8 => Payload::F64(Tensor::new(
                    e.shape,
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )?),
                _ => Payload::U8(raw.to_vec()),
            };
            entries.push((e.name, p));
        }
        Ok(Self { meta: header.meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_bytes(&b, path)
    }
}

/// File name of the checkpoint taken after `iteration` global iterations.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:07}.md3c")
}

/// Iterations of every `ckpt_*.md3c` in `dir`, ascending.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(it) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".md3c")).and_then(|s| s.parse().ok()) {
            out.push((it, p));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut c = Checkpoint::new(serde_json::json!({"iteration": 3, "stage": 1, "note": "x"}));
        c.push("student/w", Payload::F32(Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap()));
        c.push("center/dino", Payload::F64(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()));
        c.push("rng/state", Payload::U8(vec![1, 2, 3]));
        let b = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b, Path::new("c")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(&b[..4], b"MD3C");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut c = Checkpoint::new(serde_json::json!({}));
        c.push("a", Payload::F32(Tensor::ones(vec![4])));
        let b = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1], Path::new("c")).is_err());
        let mut bad = b.clone();
        bad[0] = b'm';
        assert!(Checkpoint::from_bytes(&bad, Path::new("c")).is_err());
    }

    #[test]
    fn names_and_listing() {
        assert_eq!(checkpoint_name(42), "ckpt_0000042.md3c");
        let d = tempfile::tempdir().unwrap();
        for it in [50u64, 5, 20] {
            std::fs::write(d.path().join(checkpoint_name(it)), b"").unwrap();
        }
        std::fs::write(d.path().join("other.md3c"), b"").unwrap();
        let l: Vec<u64> = list_checkpoints(d.path()).unwrap().into_iter().map(|(i, _)| i).collect();
        assert_eq!(l, vec![5, 20, 50]);
    }
}
