use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
}

/// Everything needed to repeat a run: the exact configuration, the seeds
/// derived from it, and digests of what went in and came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    pub inputs: Vec<Digest>,
    pub artifacts: Vec<Digest>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: Default::default(),
            config,
            stages: Vec::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            failed_stage: None,
            error: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| EvalError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
