use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::ModelParams;
use super::ModelError;

pub const CHECKPOINT_FORMAT: &str = "drr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container: architecture, flat weight arrays, seed and free-form
/// training metadata. Floats are written in shortest round-trip form, so
/// save → load is bit exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub model: ModelParams,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: ModelParams, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            model,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        if let Some(i) = self.model.tensors.iter().position(|t| !t.all_finite()) {
            return Err(ModelError::Checkpoint(format!("parameter tensor {i} is not finite")));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        // re-run shape validation on whatever came off disk
        let model = ModelParams::new(ck.model.arch.clone(), ck.model.tensors.clone())?;
        Ok(Self { model, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
