//! Checkpoint container and raw codebook blobs.
//!
//! Container layout:
//!
//! ```text
//! b"MPCK" | version u32 LE | header_len u64 LE | header JSON | payload
//! ```
//!
//! The header lists every tensor as `{name, group, shape, offset, len}` (offset
//! and length in bytes, relative to the payload start) and every codebook as
//! `{name, offset, len}`. Tensors are little-endian `f32`. A codebook is stored
//! as a [`CodebookBlob`]: `K u32 LE | n_z u32 LE | K*n_z f32 LE`, so a codebook
//! copied between checkpoints stays bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    /// Freeze scope the tensor belongs to (e.g. `mapper.token`).
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A `K x n_z` codebook in its on-disk form.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookBlob {
    pub k: usize,
    pub n_z: usize,
    pub data: Vec<f32>,
}

impl CodebookBlob {
    pub fn new(k: usize, n_z: usize, data: Vec<f32>) -> Result<Self> {
        if k.checked_mul(n_z) != Some(data.len()) {
            return Err(FormatError::schema(format!(
                "codebook {k}x{n_z} needs {} values, got {}",
                k.saturating_mul(n_z),
                data.len()
            )));
        }
        Ok(Self { k, n_z, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_z as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated {
                needed: 8,
                available: bytes.len(),
            });
        }
        let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as u64;
        let n_z = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
        let needed = k
            .checked_mul(n_z)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(8))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| FormatError::SizeOverflow(vec![k, n_z]))?;
        if bytes.len() < needed {
            return Err(FormatError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FormatError::TrailingBytes(bytes.len() - needed));
        }
        Ok(Self {
            k: k as usize,
            n_z: n_z as usize,
            data: decode_f32s(&bytes[8..]),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
    pub codebooks: BTreeMap<String, CodebookBlob>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    codebooks: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    offset: u64,
    len: u64,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn insert_tensor(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            FormatError::SizeOverflow(shape.iter().map(|&d| d as u64).collect())
        })?;
        if n != data.len() {
            return Err(FormatError::schema(format!(
                "tensor {name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(
            name,
            TensorRecord {
                group: group.into(),
                shape,
                data,
            },
        );
        Ok(())
    }

    /// Tensors whose group equals `group` or is nested below it (`group.*`).
    pub fn group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = (&'a String, &'a TensorRecord)> {
        self.tensors.iter().filter(move |(_, t)| in_scope(&t.group, group))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                group: t.group.clone(),
                shape: t.shape.clone(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let mut codebooks = Vec::with_capacity(self.codebooks.len());
        for (name, cb) in &self.codebooks {
            let offset = payload.len() as u64;
            payload.extend_from_slice(&cb.to_bytes());
            codebooks.push(BlobEntry {
                name: name.clone(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors,
            codebooks,
        })?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && bytes[..4] != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < PREFIX_LEN {
            return Err(FormatError::Truncated {
                needed: PREFIX_LEN,
                available: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREFIX_LEN))
            .ok_or_else(|| FormatError::SizeOverflow(vec![header_len]))?;
        if bytes.len() < header_end {
            return Err(FormatError::Truncated {
                needed: header_end,
                available: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])?;
        let payload = &bytes[header_end..];

        let mut ck = Checkpoint::new(header.config);
        for e in header.tensors {
            let raw = slice(payload, e.offset, e.len, &e.name)?;
            if raw.len() % 4 != 0 {
                return Err(FormatError::schema(format!("tensor {}: length not a multiple of 4", e.name)));
            }
            if ck.tensors.contains_key(&e.name) {
                return Err(FormatError::schema(format!("duplicate tensor {}", e.name)));
            }
            ck.insert_tensor(e.name, e.group, e.shape, decode_f32s(raw))?;
        }
        for e in header.codebooks {
            let raw = slice(payload, e.offset, e.len, &e.name)?;
            let blob = CodebookBlob::from_bytes(raw)?;
            if ck.codebooks.insert(e.name.clone(), blob).is_some() {
                return Err(FormatError::schema(format!("duplicate codebook {}", e.name)));
            }
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// True when `group` equals `scope` or lies below it in the dotted hierarchy.
pub fn in_scope(group: &str, scope: &str) -> bool {
    group == scope
        || (group.len() > scope.len()
            && group.starts_with(scope)
            && group.as_bytes()[scope.len()] == b'.')
}

fn slice<'a>(payload: &'a [u8], offset: u64, len: u64, name: &str) -> Result<&'a [u8]> {
    let start = usize::try_from(offset).ok();
    let end = start.zip(usize::try_from(len).ok()).and_then(|(s, l)| s.checked_add(l));
    match (start, end) {
        (Some(s), Some(e)) if e <= payload.len() => Ok(&payload[s..e]),
        _ => Err(FormatError::schema(format!(
            "entry {name}: range {offset}+{len} outside payload of {} bytes",
            payload.len()
        ))),
    }
}

fn decode_f32s(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}
