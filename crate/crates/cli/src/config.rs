//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use attnet::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub min_count: usize,
    /// Vocabulary cap including PAD and OOV.
    pub max_vocab: Option<usize>,
    /// Train/validation/test ratios for a single `--data` file.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_vocab: None,
            split: [0.8, 0.1, 0.1],
            split_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_model: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub split_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        crate::log_open(path);
        let text = fs::read_to_string(path).map_err(attnet::Error::from)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        // Both are fixed by the data, never by the user.
        if cfg.model.vocab_size != 0 {
            return Err(CliError::Usage("config: model.vocab_size is derived from the training data".into()));
        }
        if cfg.model.classes != 0 {
            return Err(CliError::Usage("config: model.classes is derived from the training data".into()));
        }
        Ok(cfg)
    }
}
