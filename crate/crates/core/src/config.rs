//! JSON configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, MixConfig};
use crate::error::{Error, Result};
use crate::harmonize::HarmonizeConfig;
use crate::retrieval::RetrievalConfig;

/// Every section is optional; missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub retrieval: RetrievalConfig,
    pub augment: AugmentConfig,
    pub mix: MixConfig,
    pub harmonize: HarmonizeConfig,
}

impl ToolConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ToolConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        self.augment.validate()?;
        self.mix.validate()?;
        self.harmonize.validate()
    }
}
