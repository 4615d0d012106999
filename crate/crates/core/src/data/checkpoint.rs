//! Binary container for named `f32` tensors.
//!
//! Layout: `b"NOAH"`, format version (`u32` LE), header length (`u64` LE),
//! UTF-8 JSON header, payload. The header is
//! `{"tensors":[{"name":..,"shape":[..],"dtype":"f32","offset":..},..]}`
//! with entries sorted by name and offsets counted in bytes from the start
//! of the payload. The payload is the concatenation of every tensor as
//! little-endian `f32`, in header order, with no gaps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NOAH";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("trailing data: {0} bytes after payload")]
    TrailingData(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<HeaderEntry>,
}

impl HeaderEntry {
    fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = HeaderEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += e.byte_len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in store.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Validates the preamble and header; returns the header and payload start.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::CorruptHeader("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| CheckpointError::CorruptHeader(format!("header length {header_len} exceeds file")))?
        as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut expected = 0u64;
    let mut previous: Option<&str> = None;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::CorruptHeader(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(CheckpointError::CorruptHeader(format!("{}: invalid shape {:?}", e.name, e.shape)));
        }
        if previous.is_some_and(|p| p >= e.name.as_str()) {
            return Err(CheckpointError::CorruptHeader(format!("{}: names not unique and sorted", e.name)));
        }
        if e.offset != expected {
            return Err(CheckpointError::CorruptHeader(format!(
                "{}: offset {} but payload position is {expected}",
                e.name, e.offset
            )));
        }
        expected += e.byte_len();
        previous = Some(&e.name);
    }
    let found = (bytes.len() - end) as u64;
    if found < expected {
        return Err(CheckpointError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(CheckpointError::TrailingData(found - expected));
    }
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>, CheckpointError> {
    let (header, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let begin = e.offset as usize;
        let data = payload[begin..begin + e.byte_len() as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::CorruptHeader(err.to_string()))?;
        store.insert(e.name, t);
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<(), CheckpointError> {
    fs::write(path, encode(store)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ParamStore<f32>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
