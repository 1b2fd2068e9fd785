//! Self-describing checkpoint files.
//!
//! JSON document; each parameter's values are stored as base64 of the raw
//! little-endian `f64` bytes so a save/load round trip is bitwise exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::error::{DiffError, Result};
use super::param::{ParamGroup, ParamStore};
use super::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "fsod-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    /// base64 of little-endian f64 values.
    pub data: String,
}

impl ParamRecord {
    pub fn values(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| DiffError::Checkpoint(format!("{}: {e}", self.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(DiffError::Checkpoint(format!("{}: truncated data", self.name)));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Free-form architecture description (e.g. the cascade config).
    pub manifest: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, manifest: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                let mut bytes = Vec::with_capacity(p.values().len() * 8);
                for v in p.values() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                ParamRecord {
                    name: p.name().to_string(),
                    shape: p.shape().to_vec(),
                    group: p.group(),
                    trainable: p.trainable(),
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            manifest,
            params,
        }
    }

    /// Builds a fresh store holding exactly the checkpointed parameters.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for r in &self.params {
            let t = Tensor::new(r.shape.clone(), r.values()?)?;
            let id = store.add(r.name.clone(), t, r.group)?;
            store.set_trainable(id, r.trainable);
        }
        Ok(store)
    }

    /// Loads values into an existing store. Every checkpointed name must exist
    /// with the same group; shapes may differ (classifier re-initialization
    /// changes output width) and the stored shape wins.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(DiffError::Checkpoint(format!(
                "checkpoint has {} params, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for r in &self.params {
            let id = store.id(&r.name).ok_or_else(|| DiffError::UnknownParam(r.name.clone()))?;
            if store.get(id).group() != r.group {
                return Err(DiffError::Checkpoint(format!("group mismatch for {}", r.name)));
            }
            let t = Tensor::new(r.shape.clone(), r.values()?)?;
            store.replace(id, t);
            store.set_trainable(id, r.trainable);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&s)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DiffError::Checkpoint(format!("unexpected format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
