use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::HarnessError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Identifies the run: config hash plus code version, no timestamps.
    pub hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<String>,
    pub code_version: String,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let config_hash = cfg.hash();
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        h.update(CODE_VERSION.as_bytes());
        Self {
            hash: hex::encode(h.finalize())[..16].to_string(),
            config_hash,
            seeds: cfg.seeds.clone(),
            checkpoints: Vec::new(),
            code_version: CODE_VERSION.into(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| HarnessError::Format(e.to_string()))
    }
}
