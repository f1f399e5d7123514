//! Distillation objectives: next-token cross entropy, logit matching,
//! hidden-feature alignment and affinity alignment.
//!
//! Teacher quantities enter every loss as plain tensors, so no gradient can
//! reach the teacher. Each loss has a `*_rows` or map-level form operating on
//! pre-selected rows, which the trainer uses with cached teacher targets.

mod affinity;
mod feature;
mod logit;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use affinity::{
    attention_affinity_loss, attention_map_loss, attention_target, head_mean, head_mean_values, similarity_affinity_loss,
    similarity_matrix, similarity_mse, similarity_values, AttentionGroup, SequenceLayout, NORM_EPS,
};
pub use feature::{
    feature_align_loss, feature_rows, layer_pairs, row_cosine, FeatureMetric, FeatureProjector, ProjectorVars,
    COSINE_EPS,
};
pub use logit::{
    autoregressive_ce, ce_rows, generalized_jsd, jsd_rows, kl_logit_loss, kl_rows, logit_standardize, mse_logit_loss,
    mse_rows, standardize_values, KlDirection, LogitOptions,
};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::MaskPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitLoss {
    #[default]
    None,
    ForwardKl,
    ReverseKl,
    Jsd,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLoss {
    #[default]
    None,
    Cosine,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityLoss {
    #[default]
    None,
    Attention,
    Similarity,
}

/// Named loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Autoregressive,
    Logit,
    Feature,
    Affinity,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Autoregressive,
        Component::Logit,
        Component::Feature,
        Component::Affinity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Autoregressive => "autoregressive",
            Component::Logit => "logit",
            Component::Feature => "feature",
            Component::Affinity => "affinity",
        }
    }
}

/// Which distillation terms are active and how they are weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub jsd_beta: f64,
    pub logit_loss: LogitLoss,
    pub logit_weight: f64,
    pub logit_mask: MaskPolicy,
    pub standardize_logits: bool,
    /// `T^2` factor on forward and reverse KL.
    pub kl_scale_t2: bool,
    /// `T^2` factor on the JSD.
    pub jsd_scale_t2: bool,
    pub feature_loss: FeatureLoss,
    pub feature_weight: f64,
    /// Aligned layers as offsets from the last layer; `0` is the last.
    pub feature_layers: Vec<usize>,
    pub feature_mask: MaskPolicy,
    pub affinity_loss: AffinityLoss,
    pub affinity_weight: f64,
    pub attention_group: AttentionGroup,
    pub ce_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            jsd_beta: 0.5,
            logit_loss: LogitLoss::None,
            logit_weight: 1.0,
            logit_mask: MaskPolicy::AnswerOnly,
            standardize_logits: false,
            kl_scale_t2: true,
            jsd_scale_t2: true,
            feature_loss: FeatureLoss::None,
            feature_weight: 1.0,
            feature_layers: vec![0],
            feature_mask: MaskPolicy::AnswerOnly,
            affinity_loss: AffinityLoss::None,
            affinity_weight: 1.0,
            attention_group: AttentionGroup::All,
            ce_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.jsd_beta > 0.0 && self.jsd_beta < 1.0) {
            return Err(Error::Config(format!("jsd_beta {} outside (0, 1)", self.jsd_beta)));
        }
        for (name, w) in [
            ("logit_weight", self.logit_weight),
            ("feature_weight", self.feature_weight),
            ("affinity_weight", self.affinity_weight),
            ("ce_weight", self.ce_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        if self.feature_loss != FeatureLoss::None && self.feature_layers.is_empty() {
            return Err(Error::Config("feature_layers is empty".into()));
        }
        Ok(())
    }

    /// Checks `feature_layers` against both model depths.
    pub fn validate_layers(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.feature_active() {
            layer_pairs(&self.feature_layers, student_layers, teacher_layers)?;
        }
        Ok(())
    }

    pub fn weight(&self, c: Component) -> f64 {
        match c {
            Component::Autoregressive => self.ce_weight,
            Component::Logit => self.logit_weight,
            Component::Feature => self.feature_weight,
            Component::Affinity => self.affinity_weight,
        }
    }

    pub fn logit_active(&self) -> bool {
        self.logit_loss != LogitLoss::None && self.logit_weight > 0.0
    }

    pub fn feature_active(&self) -> bool {
        self.feature_loss != FeatureLoss::None && self.feature_weight > 0.0
    }

    pub fn affinity_active(&self) -> bool {
        self.affinity_loss != AffinityLoss::None && self.affinity_weight > 0.0
    }

    pub fn is_active(&self, c: Component) -> bool {
        match c {
            Component::Autoregressive => true,
            Component::Logit => self.logit_active(),
            Component::Feature => self.feature_active(),
            Component::Affinity => self.affinity_active(),
        }
    }

    /// Whether any teacher-dependent term is active.
    pub fn uses_teacher(&self) -> bool {
        self.logit_active() || self.feature_active() || self.affinity_active()
    }

    pub fn logit_options(&self, kind: LogitLoss) -> LogitOptions {
        LogitOptions {
            temperature: self.temperature,
            standardize: self.standardize_logits,
            scale_t2: if kind == LogitLoss::Jsd {
                self.jsd_scale_t2
            } else {
                self.kl_scale_t2
            },
        }
    }

    /// Logit loss of `kind` over pre-selected rows.
    pub fn logit_rows(&self, g: &mut Graph<'_>, kind: LogitLoss, teacher: &Tensor, student: Var) -> Result<Var> {
        let opts = self.logit_options(kind);
        match kind {
            LogitLoss::None => Err(Error::Contract("no logit loss configured".into())),
            LogitLoss::ForwardKl => kl_rows(g, teacher, student, KlDirection::Forward, &opts),
            LogitLoss::ReverseKl => kl_rows(g, teacher, student, KlDirection::Reverse, &opts),
            LogitLoss::Jsd => jsd_rows(g, teacher, student, self.jsd_beta, &opts),
            LogitLoss::Mse => mse_rows(g, teacher, student),
        }
    }
}

/// Weighted total and per-component values of one evaluation.
#[derive(Debug, Clone)]
pub struct Composed {
    pub total: Var,
    pub values: Vec<(Component, f64)>,
}

/// `sum_k w_k * L_k` over the given components. The autoregressive term and
/// every active component of `config` must be present; inactive ones are
/// ignored.
pub fn compose(g: &mut Graph<'_>, config: &DistillConfig, parts: &[(Component, Var)]) -> Result<Composed> {
    for c in Component::ALL {
        if config.is_active(c) && !parts.iter().any(|(p, _)| *p == c) {
            return Err(Error::Contract(format!("active loss component {} missing", c.name())));
        }
    }
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(parts.len());
    for &(c, v) in parts {
        if g.shape(v).iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!("component {} is not a scalar", c.name())));
        }
        values.push((c, g.item(v)));
        if !config.is_active(c) {
            continue;
        }
        let w = g.scale(v, config.weight(c));
        total = Some(match total {
            None => w,
            Some(t) => g.add(t, w)?,
        });
    }
    let total = total.expect("autoregressive term is always active");
    Ok(Composed { total, values })
}
