//! Binary checkpoint: magic, version, a JSON header (model config,
//! parameter groups, tensor directory, free-form metadata), then every
//! tensor as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Group;
use super::{Model, ModelConfig, ModelError};
use crate::diffcore::Array;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CFVSRCK\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    groups: Vec<Group>,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Model parameters under their own names, plus any extra named tensors
/// (optimizer moments) and metadata the caller wants to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub groups: Vec<Group>,
    pub tensors: Vec<(String, Array)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: serde_json::Value) -> Self {
        let mut groups: Vec<Group> = model.params().iter().map(|p| p.group).collect();
        groups.sort();
        groups.dedup();
        Self {
            model: model.config().clone(),
            groups,
            tensors: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            meta,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Rebuilds the model and fills every parameter from the tensors.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let mut model = Model::new(&self.model, 0)?;
        for param in model.params_mut().iter_mut() {
            let value = self
                .tensor(&param.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", param.name)))?;
            if value.shape() != param.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    param.name,
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, a) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                offset,
            });
            offset += a.len();
        }
        let header = Header {
            model: self.model.clone(),
            groups: self.groups.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.tensors {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let body = &bytes[body_start..];
        if body.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| ModelError::Checkpoint(format!("tensor {} runs past the data", e.name)))?;
            tensors.push((e.name, Array::new(&e.shape, slice.to_vec())?));
        }
        Ok(Self {
            model: header.model,
            groups: header.groups,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
