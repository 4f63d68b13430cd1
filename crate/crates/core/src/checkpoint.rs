//! Single-file checkpoint format.
//!
//! ```text
//! offset 0   "GMMF"                      magic, 4 bytes
//! offset 4   version                     u32 little-endian (= 1)
//! offset 8   header_len                  u64 little-endian
//! offset 16  header                      UTF-8 JSON, header_len bytes
//!            zero padding                up to the next multiple of 64
//!            payload                     f32 little-endian, row-major
//! ```
//!
//! The header holds the full [`ModelConfig`] (rope base and pairing, norm eps,
//! embedding scaling, GELU variant, query scaling) and one index entry per
//! tensor. Index offsets are relative to the payload start, 64-byte aligned,
//! ascending, and each tensor is zero-padded to the next 64-byte boundary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::model::{tensor_layout, GemmaModel, ModelError};

pub const MAGIC: [u8; 4] = *b"GMMF";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{name}`: index shape {found:?} does not match {expected:?} required by the config")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor index does not match the config: {0}")]
    IndexMismatch(String),
    #[error("truncated file: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Tensor index for a config, with offsets assigned in canonical order.
pub fn build_index(cfg: &ModelConfig) -> Vec<TensorEntry> {
    let mut offset = 0usize;
    tensor_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let length = 4 * shape.iter().product::<usize>();
            let entry = TensorEntry {
                name,
                dtype: "f32".into(),
                shape,
                offset: offset as u64,
                length: length as u64,
            };
            offset += align_up(length);
            entry
        })
        .collect()
}

/// Exact size in bytes of the file [`to_bytes`] produces for `cfg`.
pub fn expected_file_size(cfg: &ModelConfig) -> Result<usize, CheckpointError> {
    let header = header_bytes(cfg)?;
    let payload: usize = build_index(cfg).iter().map(|e| align_up(e.length as usize)).sum();
    Ok(align_up(PREAMBLE + header.len()) + payload)
}

fn header_bytes(cfg: &ModelConfig) -> Result<Vec<u8>, CheckpointError> {
    let header = Header { config: cfg.clone(), tensors: build_index(cfg) };
    serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn to_bytes(model: &GemmaModel) -> Result<Vec<u8>, CheckpointError> {
    let header = header_bytes(model.config())?;
    let mut out = Vec::with_capacity(expected_file_size(model.config())?);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(align_up(out.len()), 0);
    for t in model.tensors() {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align_up(out.len()), 0);
    }
    Ok(out)
}

pub fn save_checkpoint(model: &GemmaModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GemmaModel, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

fn need(bytes: &[u8], needed: usize) -> Result<(), CheckpointError> {
    if bytes.len() < needed {
        Err(CheckpointError::Truncated { needed, found: bytes.len() })
    } else {
        Ok(())
    }
}

/// Parses and validates only the preamble and header.
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    need(bytes, PREAMBLE)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .ok_or(CheckpointError::Header("header length overflows".into()))?;
    need(bytes, header_end)?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.config.check()?;
    validate_index(&header)?;
    Ok(header)
}

fn validate_index(header: &Header) -> Result<(), CheckpointError> {
    let layout = tensor_layout(&header.config);
    let mut next_free = 0u64;
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if *name != entry.name {
            return Err(CheckpointError::IndexMismatch(format!(
                "expected `{name}`, found `{}`",
                entry.name
            )));
        }
        if *shape != entry.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(CheckpointError::IndexMismatch(format!(
                "`{name}` has dtype {}, only f32 is supported",
                entry.dtype
            )));
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if entry.length != 4 * numel {
            return Err(CheckpointError::IndexMismatch(format!(
                "`{name}` declares {} bytes for {numel} elements",
                entry.length
            )));
        }
        if entry.offset % ALIGN as u64 != 0 || entry.offset < next_free {
            return Err(CheckpointError::IndexMismatch(format!(
                "`{name}` offset {} is misaligned or overlaps the previous tensor",
                entry.offset
            )));
        }
        next_free = entry.offset + entry.length;
    }
    if layout.len() != header.tensors.len() {
        return Err(CheckpointError::IndexMismatch(format!(
            "{} tensors listed, config requires {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<GemmaModel, CheckpointError> {
    let header = read_header(bytes)?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = align_up(PREAMBLE + header_len);

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = payload_start + entry.offset as usize;
        let end = start + entry.length as usize;
        need(bytes, end)?;
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Ok(GemmaModel::from_tensors(header.config, tensors)?)
}
