use alloc::vec::Vec;

use super::sample::PreparedSample;
use crate::autodiff::Tensor;
use crate::data::{MaskPolicy, Provenance};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::losses::{
    attention_target, head_mean_values, layer_pairs, similarity_values, AffinityLoss, AttentionGroup, DistillConfig,
};
use crate::model::TransformerLM;

/// Which teacher quantities a distillation run reads. Runs with equal specs
/// can share one [`TeacherTargets`] cache.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetSpec {
    pub logit_mask: Option<MaskPolicy>,
    pub feature_layers: Vec<usize>,
    pub feature_mask: MaskPolicy,
    pub attention: Option<AttentionGroup>,
    pub similarity: bool,
}

impl TargetSpec {
    pub fn new(
        distill: &DistillConfig,
        student_layers: usize,
        teacher_layers: usize,
        data: &[PreparedSample],
    ) -> Result<Self> {
        let regen = data.iter().any(|s| s.provenance == Provenance::StudentRegenerated);
        let feature_layers = if distill.feature_active() {
            layer_pairs(&distill.feature_layers, student_layers, teacher_layers)?
                .into_iter()
                .map(|(_, t)| t)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            logit_mask: (distill.logit_active() || regen).then_some(distill.logit_mask),
            feature_layers,
            feature_mask: distill.feature_mask,
            attention: (distill.affinity_active() && distill.affinity_loss == AffinityLoss::Attention)
                .then_some(distill.attention_group),
            similarity: distill.affinity_active() && distill.affinity_loss == AffinityLoss::Similarity,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.logit_mask.is_none() && self.feature_layers.is_empty() && self.attention.is_none() && !self.similarity
    }
}

/// Gradient-free teacher quantities for one sample, already reduced to the
/// rows the losses read.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherTargets {
    /// Logit rows predicting the masked positions.
    pub logits: Option<Tensor>,
    /// One per entry of `TargetSpec::feature_layers`, rows at masked positions.
    pub hidden: Vec<Tensor>,
    pub attention: Option<Tensor>,
    pub similarity: Option<Tensor>,
}

pub fn teacher_targets(teacher: &TransformerLM, s: &PreparedSample, spec: &TargetSpec) -> Result<TeacherTargets> {
    if spec.is_empty() {
        return Ok(TeacherTargets::default());
    }
    let z = teacher.encode_visual(&s.image)?;
    let rows = match spec.logit_mask {
        Some(m) => s.sample.mask(m).prediction_rows(),
        None => alloc::vec![0],
    };
    let out = teacher.forward_values_rows(&z, &s.sample.ids, Some(&rows))?;
    let logits = spec.logit_mask.map(|_| out.logits);
    let pos = s.sample.mask(spec.feature_mask).positions();
    let hidden = spec
        .feature_layers
        .iter()
        .map(|&l| out.hidden_states[l].select_rows(&pos))
        .collect();
    let attention = match spec.attention {
        Some(group) => {
            let heads = out
                .attention
                .last()
                .ok_or_else(|| Error::Contract("teacher has no layers".into()))?;
            Some(attention_target(&head_mean_values(heads)?, group, &s.layout)?)
        }
        None => None,
    };
    let similarity = if spec.similarity {
        let h = out
            .hidden_states
            .last()
            .ok_or_else(|| Error::Contract("teacher has no layers".into()))?;
        Some(similarity_values(h, s.layout.image, &s.text)?)
    } else {
        None
    };
    Ok(TeacherTargets {
        logits,
        hidden,
        attention,
        similarity,
    })
}

/// Teacher targets for every sample, in order.
pub fn build_cache<E: Executor>(
    exec: &E,
    teacher: &TransformerLM,
    data: &[PreparedSample],
    spec: &TargetSpec,
) -> Result<Vec<TeacherTargets>> {
    exec.map(data.len(), |i| teacher_targets(teacher, &data[i], spec))
        .into_iter()
        .collect()
}
