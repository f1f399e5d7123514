//! Experiment configuration files (TOML).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlkd_core::data::DataConfig;
use vlkd_core::losses::DistillConfig;
use vlkd_core::model::{ModelSpec, Role, TransformerLM, VisualEncoder, VisualEncoderSpec};
use vlkd_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Model shape overrides on top of the role's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub role: Role,
    pub vocab_size: Option<usize>,
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub visual: Option<VisualEncoderSpec>,
    /// Seed of the language model weights.
    pub seed: u64,
    /// Seed of the frozen visual encoder; teacher and student must agree.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            role: Role::Student,
            vocab_size: None,
            num_layers: None,
            hidden_dim: None,
            num_heads: None,
            ffn_dim: None,
            max_seq_len: None,
            visual: None,
            seed: 1,
            encoder_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        let base = match self.role {
            Role::Teacher => ModelSpec::teacher(),
            Role::Student => ModelSpec::student(),
        };
        ModelSpec {
            vocab_size: self.vocab_size.unwrap_or(base.vocab_size),
            num_layers: self.num_layers.unwrap_or(base.num_layers),
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            num_heads: self.num_heads.unwrap_or(base.num_heads),
            ffn_dim: self.ffn_dim.unwrap_or(base.ffn_dim),
            max_seq_len: self.max_seq_len.unwrap_or(base.max_seq_len),
            visual: self.visual.unwrap_or(base.visual),
            ..base
        }
    }

    /// Freshly initialized model.
    pub fn build(&self) -> Result<TransformerLM> {
        let spec = self.spec();
        let enc = VisualEncoder::new(spec.visual, self.encoder_seed)?;
        Ok(TransformerLM::new(spec, enc, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: path.into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.spec().validate()?;
        self.data.grid.validate()?;
        self.train.validate()?;
        self.distill.validate()?;
        Ok(())
    }
}
