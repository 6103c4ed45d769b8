//! Binary checkpoint files.
//!
//! ```text
//! "KALC" | version u32 | header_len u64 | header (JSON, header_len bytes) | tensor data
//! ```
//!
//! The header holds the run configuration, step counters and a table of
//! `(name, dtype, shape, offset, len)` entries locating each tensor in the
//! data block. Tensor data is raw little-endian in the tensor's dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RngState, RunConfig};
use crate::model::{schema, ParameterSet};
use crate::numeric::{DType, Tensor};
use crate::optimizer::{LambConfig, LambState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KALC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

const PARAM: &str = "param/";
const MOMENT1: &str = "lamb_m/";
const MOMENT2: &str = "lamb_v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer updates completed.
    pub step: u64,
    pub params: ParameterSet,
    pub optimizer: LambState,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: LambConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    step: u64,
    rng: RngState,
    optimizer: OptimizerHeader,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let groups = [(PARAM, &self.params), (MOMENT1, &self.optimizer.m), (MOMENT2, &self.optimizer.v)];
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (prefix, set) in groups {
            for (name, t) in set.iter() {
                let offset = data.len() as u64;
                match t.dtype() {
                    DType::F32 => t.data().iter().for_each(|&x| data.extend_from_slice(&(x as f32).to_le_bytes())),
                    DType::F64 => t.data().iter().for_each(|&x| data.extend_from_slice(&x.to_le_bytes())),
                }
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: data.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer: OptimizerHeader {
                config: self.optimizer.config.clone(),
                step: self.optimizer.step,
            },
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < PREFIX_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let data_start = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREFIX_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..data_start]).map_err(|e| corrupt(format!("header: {e}")))?;
        let data = &bytes[data_start..];

        let mut expected_end = 0u64;
        let mut tensors = std::collections::HashMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.len != (numel * e.dtype.size_in_bytes()) as u64 || e.offset != expected_end {
                return Err(corrupt(format!("tensor {} has inconsistent extent", e.name)));
            }
            expected_end = e.offset + e.len;
            if expected_end > data.len() as u64 {
                return Err(corrupt(format!(
                    "tensor {} extends past the end of the file ({} > {})",
                    e.name,
                    expected_end,
                    data.len()
                )));
            }
            let raw = &data[e.offset as usize..expected_end as usize];
            let values: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            };
            let t = Tensor::new(e.shape.clone(), values, e.dtype)
                .map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
            if tensors.insert(e.name.as_str(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_end != data.len() as u64 {
            return Err(corrupt(format!(
                "data block is {} bytes, tensors cover {expected_end}",
                data.len()
            )));
        }

        let specs = schema(&header.config.model);
        let mut take = |prefix: &str| -> Result<ParameterSet, CheckpointError> {
            let mut set = ParameterSet::new();
            for spec in &specs {
                let key = format!("{prefix}{}", spec.name);
                let t = tensors.remove(key.as_str()).ok_or(CheckpointError::MissingTensor(key.clone()))?;
                if t.shape() != spec.shape.as_slice() {
                    return Err(corrupt(format!("tensor {key} has shape {:?}, expected {:?}", t.shape(), spec.shape)));
                }
                set.insert(spec.name, t).map_err(|e| corrupt(e.to_string()))?;
            }
            Ok(set)
        };
        let params = take(PARAM)?;
        let m = take(MOMENT1)?;
        let v = take(MOMENT2)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            params,
            optimizer: LambState {
                config: header.optimizer.config,
                step: header.optimizer.step,
                m,
                v,
            },
            rng: header.rng,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
