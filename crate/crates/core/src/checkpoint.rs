//! Self-describing model container.
//!
//! Layout: `TCK1`, little-endian `u64` header length, UTF-8 JSON header,
//! then the tensor blob (`f32` little-endian, concatenated in header order).
//! The header carries the model kind, its architecture block, free-form
//! metadata and a `{name, shape, offset, len}` index of tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::sha256_hex;
use crate::ndmath::{ParamStore, Scalar};

const MAGIC: &[u8; 4] = b"TCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint kind `{found}`, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("tensor `{name}`: {problem}")]
    Tensor { name: String, problem: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    kind: String,
    architecture: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, architecture: serde_json::Value, meta: serde_json::Value) -> Self {
        Checkpoint { kind: kind.into(), architecture, meta, tensors: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push((name.into(), shape.to_vec(), values));
    }

    pub fn push_params<S: Scalar>(&mut self, params: &ParamStore<S>) {
        for p in params.params() {
            self.push_tensor(p.name.clone(), &p.shape, p.value.iter().map(|v| v.as_f64() as f32).collect());
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| (t.1.as_slice(), t.2.as_slice()))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.0.as_str())
    }

    /// Overwrite every parameter of `params` from the same-named tensor.
    pub fn load_params<S: Scalar>(&self, params: &mut ParamStore<S>) -> Result<(), CheckpointError> {
        for p in params.params_mut() {
            let (shape, values) = self.tensor(&p.name).ok_or_else(|| CheckpointError::Tensor { name: p.name.clone(), problem: "missing".into() })?;
            if shape != p.shape.as_slice() {
                return Err(CheckpointError::Tensor { name: p.name.clone(), problem: format!("shape {shape:?}, model expects {:?}", p.shape) });
            }
            for (d, s) in p.value.iter_mut().zip(values) {
                *d = S::of(*s as f64);
            }
        }
        Ok(())
    }

    pub fn expect_kind(&self, allowed: &[&str]) -> Result<(), CheckpointError> {
        if allowed.contains(&self.kind.as_str()) {
            Ok(())
        } else {
            Err(CheckpointError::WrongKind { expected: allowed.join("|"), found: self.kind.clone() })
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, v)| {
                let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: v.len() };
                offset += v.len();
                e
            })
            .collect();
        let header = Header { format: FORMAT_VERSION, kind: self.kind.clone(), architecture: self.architecture.clone(), meta: self.meta.clone(), tensors: entries };
        let hbytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + hbytes.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for (_, _, v) in &self.tensors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("bad magic, expected TCK1".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported format {}", header.format)));
        }
        let blob = &bytes[12 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(CheckpointError::Tensor { name: e.name, problem: "shape/length mismatch".into() });
            }
            let raw = blob
                .get(e.offset * 4..(e.offset + e.len) * 4)
                .ok_or_else(|| CheckpointError::Tensor { name: e.name.clone(), problem: "out of bounds".into() })?;
            let values = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, e.shape, values));
        }
        Ok(Checkpoint { kind: header.kind, architecture: header.architecture, meta: header.meta, tensors })
    }

    /// Write to `path`; returns the file's SHA-256.
    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let bytes = self.encode();
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Read from `path`, returning the checkpoint and the file's SHA-256.
    pub fn load(path: &Path) -> Result<(Self, String), CheckpointError> {
        let bytes = std::fs::read(path)?;
        Ok((Checkpoint::decode(&bytes)?, sha256_hex(&bytes)))
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
    }
}
