//! Run configuration: one JSON document covering model, trainer, losses and
//! data, with dotted `key=value` overrides.
//!
//! Unknown keys are rejected both in files and in overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::{CxConfig, LossWeights};
use crate::model::ModelConfig;
use crate::trainer::{AdmmConfig, TrainConfig};

/// Environment variable that replaces every seed in the config.
pub const SEED_ENV: &str = "PDSR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest (file or directory holding `manifest.tsv`).
    pub train: Option<PathBuf>,
    /// Validation manifest; full images are used.
    pub val: Option<PathBuf>,
    /// Number of training patches drawn once before training.
    pub patches: usize,
    pub patch_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            patches: 64,
            patch_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub admm: AdmmConfig,
    pub weights: LossWeights,
    pub cx: CxConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` if given, otherwise starts from defaults; then applies
    /// overrides in order and the seed environment variable.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not a u64")))?;
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.admm.seed = seed;
        self.data.patch_seed = seed;
    }

    /// Applies one `a.b.c=value` override. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<RunConfig> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.data.patches == 0 {
            return Err(Error::Config("data.patches must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            admm: self.admm.clone(),
            weights: self.weights,
            cx: self.cx,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
