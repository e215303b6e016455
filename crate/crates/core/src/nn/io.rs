//! Model files: `MPF1`, a little-endian `u32` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::nn::model::{build_model, ModelSpec, Network};
use crate::nn::params::{ParamRole, ParamStore};
use crate::nn::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MPF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    seed: u64,
    norm: Option<NormStats>,
    train: Option<TrainConfig>,
    /// Feature-extraction settings the model was trained with.
    pipeline: Option<serde_json::Value>,
    tensors: Vec<TensorMeta>,
}

/// A trained model with everything needed to run it on new audio.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub spec: ModelSpec,
    pub seed: u64,
    pub norm: Option<NormStats>,
    pub train: Option<TrainConfig>,
    pub pipeline: Option<serde_json::Value>,
    pub store: ParamStore,
}

impl SavedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            norm: self.norm.clone(),
            train: self.train.clone(),
            pipeline: self.pipeline.clone(),
            tensors: self
                .store
                .tensors()
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidInput(format!("model header: {e}")))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::InvalidInput("model header too large".into()))?;
        let payload: usize = self.store.tensors().iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.store.tensors() {
            for &v in &t.data {
                let v = v as f32;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("tensor {} does not fit in f32", t.name)));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptModel(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MPF1 magic"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::CorruptModel(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CorruptModel(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        // the architecture fixes the tensor layout; the file must agree with it
        let (_, mut store) = build_model(&header.spec, header.seed)?;
        if store.tensors().len() != header.tensors.len() {
            return Err(corrupt("tensor list does not match the model kind"));
        }
        let mut offset = 8 + len;
        for (t, meta) in store.tensors_mut().iter_mut().zip(&header.tensors) {
            if t.name != meta.name || t.shape != meta.shape || t.role != meta.role {
                return Err(Error::CorruptModel(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    meta.name, meta.shape, t.name, t.shape
                )));
            }
            let end = offset + 4 * t.data.len();
            let raw = bytes.get(offset..end).ok_or_else(|| corrupt("truncated tensor payload"))?;
            for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after tensor payload"));
        }
        Ok(Self {
            spec: header.spec,
            seed: header.seed,
            norm: header.norm,
            train: header.train,
            pipeline: header.pipeline,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network graph for these parameters.
    pub fn network(&self) -> Result<Network> {
        Ok(build_model(&self.spec, self.seed)?.0)
    }
}
