//! JSON checkpoints: `{"schema_version", "model", "config", "seed", "params"}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// `"annotator"` or `"efilm"`.
    pub model: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Parameter name → rows.
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(model: &str, config: serde_json::Value, seed: u64, store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|p| (p.name.clone(), p.value.cast::<f64>().to_rows()))
            .collect();
        Self { schema_version: SCHEMA_VERSION, model: model.to_string(), config, seed, params }
    }

    /// Overwrites every parameter of `store` from this checkpoint. Names and
    /// shapes must match exactly.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in store.iter_mut() {
            let rows = self
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let m = Matrix::<f64>::from_rows(rows)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {} has ragged rows", p.name)))?;
            if m.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m.cast();
        }
        Ok(())
    }

    /// Shape of every parameter, in name order.
    pub fn shapes(&self) -> BTreeMap<&str, (usize, usize)> {
        self.params
            .iter()
            .map(|(k, rows)| (k.as_str(), (rows.len(), rows.first().map_or(0, Vec::len))))
            .collect()
    }

    /// Scalar parameter count per top-level name group (text before the first `.`).
    pub fn group_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, (r, c)) in self.shapes() {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(group).or_insert(0) += r * c;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, rejecting schema versions newer than this build.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { source, .. } => Error::json(path, source),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json("<checkpoint>", e))?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(Error::Incompatible {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::json("<checkpoint>", e))
    }
}
