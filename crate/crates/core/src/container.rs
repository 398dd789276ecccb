//! Manifest-plus-blob file format used by checkpoints, bundles and LID models.
//!
//! Layout: 8-byte magic `LXTENSOR`, a little-endian `u64` manifest length,
//! the JSON manifest, then the tensor blob as little-endian f64 in manifest
//! order. Entry offsets are byte offsets into the blob. The manifest's
//! `checksum` is 64-bit FNV-1a over the blob bytes.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LXTENSOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<M> {
    pub kind: String,
    pub format_version: u32,
    /// 16 hex digits.
    pub checksum: String,
    pub entries: Vec<Entry>,
    pub meta: M,
}

/// FNV-1a over the little-endian bytes of every value, in order.
pub fn checksum<'t>(tensors: impl IntoIterator<Item = &'t Tensor>) -> u64 {
    let mut h = FnvHasher::default();
    for t in tensors {
        for v in t.data() {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

pub fn format_checksum(c: u64) -> String {
    format!("{c:016x}")
}

pub fn parse_checksum(s: &str) -> Option<u64> {
    u64::from_str_radix(s, 16).ok()
}

pub fn write<M: Serialize>(path: &Path, kind: &str, meta: &M, named: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(named.len());
    let mut blob = Vec::new();
    for (name, t) in named {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() as u64 });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        format_version: FORMAT_VERSION,
        checksum: format_checksum(checksum(named.iter().map(|(_, t)| *t))),
        entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a container of the expected `kind`, verifying the blob checksum.
pub fn read<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Manifest<M>, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest<M> = serde_json::from_slice(json)?;
    if manifest.kind != kind {
        return Err(bad(format!("expected a {kind} file, found {}", manifest.kind)));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = &bytes[16 + len..];
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let chunk = blob.get(start..start + 8 * n).ok_or_else(|| bad(format!("entry {} out of bounds", e.name)))?;
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    let expected = parse_checksum(&manifest.checksum).ok_or_else(|| bad("unreadable checksum".into()))?;
    let found = checksum(tensors.iter().map(|(_, t)| t));
    if expected != found {
        return Err(Error::Checksum { expected, found });
    }
    Ok((manifest, tensors))
}
