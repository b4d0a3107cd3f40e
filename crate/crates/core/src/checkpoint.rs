//! Binary checkpoints: `PAQD` magic, u32 LE version, u64 LE header length,
//! a JSON header, then every tensor as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{Detector, ModelConfig, ModelError, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"PAQD";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub detector: Detector<T>,
    pub epoch: usize,
    pub rng: RngState,
}

pub fn encode_checkpoint<T: Scalar>(det: &Detector<T>, epoch: usize, rng: &RngState) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in det.params().iter() {
        let length = 4 * t.numel() as u64;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = CheckpointHeader {
        model: det.config().clone(),
        epoch,
        rng: rng.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in det.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("{what} needs {n} bytes at offset {pos}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Parses the header only, after checking magic and version.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), CheckpointError> {
    let mut pos = 0;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    pos += 4;
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let json = take(bytes, &mut pos, len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, pos))
}

/// Decodes a checkpoint and rebuilds the model. When `expected` is given the
/// tensors must fit that configuration instead of the stored one.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>, CheckpointError> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    let mut store = ParamStore::new();
    let mut next = 0u64;
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != next {
            return Err(CheckpointError::Header(format!(
                "tensor {} starts at byte {} but the previous one ends at {next}",
                e.name, e.offset
            )));
        }
        if e.length != 4 * numel as u64 {
            return Err(CheckpointError::Header(format!(
                "tensor {} has shape {:?} but {} bytes",
                e.name, e.shape, e.length
            )));
        }
        next += e.length;
        if store.get(&e.name).is_some() {
            return Err(CheckpointError::Header(format!("duplicate tensor {}", e.name)));
        }
        let mut pos = e.offset as usize;
        let raw = take(payload, &mut pos, e.length as usize, &e.name)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).expect("length checked"));
    }
    if payload.len() as u64 != next {
        return Err(if (payload.len() as u64) < next {
            CheckpointError::Truncated(format!("payload has {} of {next} bytes", payload.len()))
        } else {
            CheckpointError::Header(format!("{} trailing bytes after the last tensor", payload.len() as u64 - next))
        });
    }
    let config = expected.cloned().unwrap_or(header.model);
    Ok(Checkpoint {
        detector: Detector::from_params(config, store)?,
        epoch: header.epoch,
        rng: header.rng,
    })
}

/// Writes through a temporary file so an interrupted save never clobbers
/// the previous checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, det: &Detector<T>, epoch: usize, rng: &RngState) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(det, epoch, rng)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    load_checkpoint_for(path, None)
}

pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, expected)
}
