//! Pipeline configuration: one JSON document, every section optional
//! with module defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mmd::detect::DetectorConfig;
use mmd::frequency::FrequencyConfig;
use mmd::rank::RankWeights;
use mmd::retrieve::RetrievalConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub retrieval: RetrievalConfig,
    pub frequency: FrequencyConfig,
    /// Inline ranking weights; ignored when `weights_path` is set.
    pub weights: RankWeights,
    /// Path to fitted weights (JSON), overriding `weights`.
    pub weights_path: Option<PathBuf>,
    pub period_cache_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detector: DetectorConfig::default(),
            retrieval: RetrievalConfig::default(),
            frequency: FrequencyConfig::default(),
            weights: RankWeights::default(),
            weights_path: None,
            period_cache_path: None,
            history_path: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Effective ranking weights, loading `weights_path` when present.
    pub fn load_weights(&self) -> anyhow::Result<RankWeights> {
        match &self.weights_path {
            None => Ok(self.weights.clone()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading weights {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing weights {}", path.display()))
            }
        }
    }
}
