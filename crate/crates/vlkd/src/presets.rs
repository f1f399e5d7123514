//! Built-in ablation matrices, one per experiment table plus the combined
//! matrix used by the acceptance run.

use serde::{Deserialize, Serialize};
use vlkd_core::ablation::{AblationEntry, AblationMatrix, DataSource};
use vlkd_core::data::MaskPolicy;
use vlkd_core::losses::{AffinityLoss, AttentionGroup, DistillConfig, FeatureLoss, LogitLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Feature alignment layers and metric.
    Features,
    /// Logit divergences, standardization and token coverage.
    Logits,
    /// Attention and similarity affinity.
    Affinity,
    /// Teacher- and student-generated answers.
    Data,
    /// Forward KL, feature alignment and teacher data.
    Findings,
}

pub fn forward_kl() -> DistillConfig {
    DistillConfig {
        logit_loss: LogitLoss::ForwardKl,
        temperature: 0.7,
        logit_mask: MaskPolicy::AnswerOnly,
        ..DistillConfig::default()
    }
}

fn logit(kind: LogitLoss) -> DistillConfig {
    DistillConfig {
        logit_loss: kind,
        ..forward_kl()
    }
}

pub fn feature(layers: Vec<usize>, kind: FeatureLoss) -> DistillConfig {
    DistillConfig {
        feature_loss: kind,
        feature_layers: layers,
        ..DistillConfig::default()
    }
}

fn affinity(kind: AffinityLoss, group: AttentionGroup) -> DistillConfig {
    DistillConfig {
        affinity_loss: kind,
        attention_group: group,
        ..DistillConfig::default()
    }
}

pub fn matrix(preset: Preset) -> AblationMatrix {
    let entries = match preset {
        Preset::Features => vec![
            AblationEntry::new("last_layer", feature(vec![0], FeatureLoss::Cosine)),
            AblationEntry::new("last_two_layers", feature(vec![0, 1], FeatureLoss::Cosine)),
            AblationEntry::new("last_layer_mse", feature(vec![0], FeatureLoss::Mse)),
        ],
        Preset::Logits => vec![
            AblationEntry::new("forward_kl", forward_kl()),
            AblationEntry::new("reverse_kl", logit(LogitLoss::ReverseKl)),
            AblationEntry::new("jsd", logit(LogitLoss::Jsd)),
            AblationEntry::new("logit_mse", logit(LogitLoss::Mse)),
            AblationEntry::new(
                "forward_kl_standardized",
                DistillConfig {
                    standardize_logits: true,
                    ..forward_kl()
                },
            ),
            AblationEntry::new(
                "forward_kl_all_tokens",
                DistillConfig {
                    logit_mask: MaskPolicy::AllTokens,
                    ..forward_kl()
                },
            ),
        ],
        Preset::Affinity => vec![
            AblationEntry::new("attention_all", affinity(AffinityLoss::Attention, AttentionGroup::All)),
            AblationEntry::new(
                "attention_image_answer",
                affinity(AffinityLoss::Attention, AttentionGroup::ImageToAnswer),
            ),
            AblationEntry::new("similarity", affinity(AffinityLoss::Similarity, AttentionGroup::All)),
        ],
        Preset::Data => vec![
            AblationEntry::new("forward_kl", forward_kl()),
            AblationEntry::new("teacher_data", forward_kl()).with_data(DataSource::TeacherRegenerated),
            AblationEntry::new("student_data", forward_kl()).with_data(DataSource::StudentRegenerated),
        ],
        Preset::Findings => vec![
            AblationEntry::new("forward_kl", forward_kl()),
            AblationEntry::new("last_layer", feature(vec![0], FeatureLoss::Cosine)),
            AblationEntry::new("last_two_layers", feature(vec![0, 1], FeatureLoss::Cosine)),
            AblationEntry::new("teacher_data", forward_kl()).with_data(DataSource::TeacherRegenerated),
        ],
    };
    AblationMatrix {
        entries,
        ..AblationMatrix::default()
    }
}
