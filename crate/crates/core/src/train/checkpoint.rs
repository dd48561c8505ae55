//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the
//! header as JSON, then every parameter as raw little-endian `f64` in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RestorationModel, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TXRSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Iterations consumed; each iteration derives its own stream.
    pub position: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    stage: Stage,
    iteration: u64,
    rng: RngState,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage: Stage,
    pub iteration: u64,
    pub rng: RngState,
    pub params: ParamStore,
}

impl Checkpoint {
    /// A freshly initialized model, tagged as the start of the refine stage.
    pub fn fresh(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let m = RestorationModel::new(model)?;
        Ok(Self {
            model,
            rng: RngState { seed: train.seed, position: 0 },
            train,
            stage: Stage::Refine,
            iteration: 0,
            params: m.params().clone(),
        })
    }

    pub fn build_model(&self) -> Result<RestorationModel> {
        RestorationModel::from_params(self.model, &self.params)
    }

    /// Re-targets the checkpoint at another architecture variant: parameters
    /// shared by both (same name and shape) are kept, the rest are freshly
    /// initialized. Used to branch ablations off a common refine stage.
    pub fn into_variant(self, variant: Variant) -> Result<Self> {
        let model = self.model.with_variant(variant);
        let mut params = RestorationModel::new(model)?.params().clone();
        for (name, t) in params.iter_mut() {
            if let Some(src) = self.params.get(name).filter(|s| s.shape() == t.shape()) {
                *t = src.clone();
            }
        }
        Ok(Self { model, params, ..self })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model,
            train: self.train.clone(),
            stage: self.stage,
            iteration: self.iteration,
            rng: self.rng,
            params: self.params.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body_start = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(20))
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body_start]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let needed: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * 8;
        let body = &bytes[body_start..];
        if body.len() != needed {
            return Err(corrupt(&format!("expected {needed} parameter bytes, found {}", body.len())));
        }
        let mut params = ParamStore::new();
        let mut off = 0;
        for p in header.params {
            let n: usize = p.shape.iter().product();
            let data = body[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            params.insert(p.name, Tensor::new(p.shape, data)?);
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            stage: header.stage,
            iteration: header.iteration,
            rng: header.rng,
            params,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
