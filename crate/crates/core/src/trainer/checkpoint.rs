//! Versioned binary checkpoints.
//!
//! Layout: `GRAMCKPT`, format version (u32 LE), header length (u64 LE), JSON
//! header, then every tensor of the manifest as little-endian f32 in order:
//! parameters, `z0.h`, `z0.l`, EMA shadow, Adam first and second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{GramError, Result};
use crate::model::{LatentState, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GRAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    fingerprint: String,
    step: u64,
    adam_t: u64,
    manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<f32>,
    pub z0: LatentState<f32>,
    pub ema: Vec<Tensor<f32>>,
    pub opt: AdamW,
    pub step: u64,
}

/// SHA-256 over the canonical JSON of both configs.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(model).expect("config serialises"));
    hasher.update(serde_json::to_vec(train).expect("config serialises"));
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model, &self.train)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .zip(self.params.decays())
            .map(|((name, t), &decay)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), decay })
            .collect();
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            fingerprint: self.fingerprint(),
            step: self.step,
            adam_t: self.opt.t,
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.params.tensors().iter().chain([&self.z0.h, &self.z0.l]).chain(&self.ema).chain(&self.opt.m).chain(&self.opt.v);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| GramError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(GramError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| GramError::Checkpoint(format!("header: {e}")))?;
        if header.fingerprint != fingerprint(&header.model, &header.train) {
            return Err(bad("config fingerprint does not match header"));
        }
        let mut cursor = 20 + hlen;
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes.get(cursor..cursor + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 4 * n;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        for e in &header.manifest {
            let t = read(&e.shape)?;
            params.add(e.name.clone(), t, e.decay);
        }
        let zshape = [header.model.positions(), header.model.d_model];
        let z0 = LatentState { h: read(&zshape)?, l: read(&zshape)? };
        let mut group = || -> Result<Vec<Tensor<f32>>> { header.manifest.iter().map(|e| read(&e.shape)).collect() };
        let ema = group()?;
        let m = group()?;
        let v = group()?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let tc = &header.train;
        let opt = AdamW { beta1: tc.adam_beta1, beta2: tc.adam_beta2, eps: tc.adam_eps, m, v, t: header.adam_t };
        Ok(Checkpoint { model: header.model, train: header.train, params, z0, ema, opt, step: header.step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Loads and refuses a checkpoint whose configs differ from `expected`.
    pub fn load_expecting(path: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.fingerprint() != fingerprint(model, train) {
            return Err(GramError::Checkpoint(format!("{} was written for a different configuration", path.display())));
        }
        Ok(ck)
    }
}
