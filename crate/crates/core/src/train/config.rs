use alloc::format;

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::data::MaskPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Projector only, captions, no distillation.
    Pretrain,
    /// Projector and language model.
    #[default]
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

/// Optimization settings of one training stage.
///
/// `batch_size` and `learning_rate` default by stage (256 and 1e-3 for
/// pretraining, 128 and 2e-5 for fine-tuning) when left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_grad: bool,
    pub clip_norm: f64,
    /// Precompute teacher targets once instead of every step.
    pub teacher_cache: bool,
    /// Use only the first `n` training samples.
    pub max_samples: Option<usize>,
    /// Positions scored by the cross-entropy term.
    pub ce_mask: MaskPolicy,
    /// Held-out samples scored after every epoch.
    pub heldout_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: None,
            learning_rate: None,
            warmup_ratio: 0.03,
            schedule: LrSchedule::Cosine,
            epochs: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_grad: false,
            clip_norm: 1.0,
            teacher_cache: false,
            max_samples: None,
            ce_mask: MaskPolicy::AnswerOnly,
            heldout_samples: 64,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            ..Self::default()
        }
    }

    pub fn finetune() -> Self {
        Self::default()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::Pretrain => 256,
            Stage::Finetune => 128,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Pretrain => 1e-3,
            Stage::Finetune => 2e-5,
        })
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.batch_size() == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.clip_grad && !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.max_samples == Some(0) {
            return Err(Error::Config("max_samples must be at least 1".into()));
        }
        Ok(())
    }
}
