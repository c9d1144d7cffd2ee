use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::systems::SystemSpec;
use crate::training::{DataConfig, ModelConfig, OptimConfig, TrainingConfig};

/// Contents of a run configuration file.
///
/// ```toml
/// [system]
/// kind = "lorenz63"
///
/// [data]
/// n_traj = 10
///
/// [training]
/// epochs = 100
///
/// [eval]
/// steps = 50000
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: OptimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(system: SystemSpec) -> Self {
        RunConfig {
            system,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.training_config().validate()?;
        self.eval.validate()?;
        if let Some(b) = &self.eval.init_box {
            if b.len() != self.system.dim() {
                return Err(Error::Config("eval.init_box dimension mismatch".into()));
            }
        }
        Ok(())
    }

    /// Replaces every seed (data, training, eval) with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.training.seed = seed;
        self.eval.seed = seed;
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            system: self.system.clone(),
            data: self.data.clone(),
            model: self.model.clone(),
            training: self.training.clone(),
        }
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
