//! Experiment matrices: one student per (configuration, seed), all starting
//! from the same stage-1 checkpoint and scored on the same eval set.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{regenerate_with_student, regenerate_with_teacher, Conversation, Vocabulary, DEFAULT_MAX_ANSWER_TOKENS};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, EvalReport};
use crate::exec::Executor;
use crate::losses::{AffinityLoss, DistillConfig, FeatureLoss, LogitLoss};
use crate::math;
use crate::model::{Generation, TransformerLM};
use crate::train::{build_cache, prepare, PreparedSample, Session, Stage, TargetSpec, TeacherTargets, TrainConfig};

pub const BASELINE: &str = "baseline";

/// Where a run's answers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Original,
    TeacherRegenerated,
    StudentRegenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    pub name: String,
    #[serde(default)]
    pub data: DataSource,
    /// Share of samples the student regenerates.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn default_rho() -> f64 {
    crate::data::STUDENT_REGEN_FRACTION
}

fn default_seeds() -> Vec<u64> {
    alloc::vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    #[serde(default)]
    pub entries: Vec<AblationEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            seeds: default_seeds(),
        }
    }
}

impl AblationEntry {
    pub fn new(name: &str, distill: DistillConfig) -> Self {
        Self {
            name: name.to_string(),
            data: DataSource::Original,
            rho: default_rho(),
            distill,
        }
    }

    pub fn baseline() -> Self {
        Self::new(BASELINE, DistillConfig::default())
    }

    pub fn with_data(mut self, data: DataSource) -> Self {
        self.data = data;
        self
    }

    fn is_baseline(&self) -> bool {
        self.data == DataSource::Original && !self.distill.uses_teacher() && self.distill.ce_weight == 1.0
    }
}

impl AblationMatrix {
    /// Entries in run order with the baseline first.
    pub fn resolved(&self) -> Result<Vec<AblationEntry>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if seen.insert(e.name.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate configuration name {:?}", e.name)));
            }
            e.distill.validate()?;
            if !(0.0..=1.0).contains(&e.rho) {
                return Err(Error::Parameter(format!("{}: regeneration fraction {} outside [0, 1]", e.name, e.rho)));
            }
        }
        let mut out = Vec::with_capacity(self.entries.len() + 1);
        match self.entries.iter().position(|e| e.name == BASELINE) {
            Some(i) if !self.entries[i].is_baseline() => {
                return Err(Error::Config("the baseline entry must not distill".into()))
            }
            Some(i) => out.push(self.entries[i].clone()),
            None => out.push(AblationEntry::baseline()),
        }
        out.extend(self.entries.iter().filter(|e| e.name != BASELINE).cloned());
        Ok(out)
    }

    /// Number of training runs.
    pub fn runs(&self) -> Result<usize> {
        Ok(self.resolved()?.len() * self.seeds.len())
    }
}

/// Sample mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            math::sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub summary: String,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub runs: Vec<EvalReport>,
    pub accuracy: Stat,
    pub agreement: Stat,
    pub heldout_loss: Stat,
    /// Mean of the percentage metrics.
    pub avg: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub eval_samples: usize,
    /// Teacher accuracy on the eval set, percent.
    pub teacher_accuracy: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn baseline(&self) -> Option<&AblationRow> {
        self.row(BASELINE)
    }
}

/// One-line description of the active terms.
pub fn summarize(d: &DistillConfig) -> String {
    let mut parts = Vec::new();
    if d.ce_weight != 1.0 {
        parts.push(format!("ce×{}", d.ce_weight));
    }
    if d.logit_active() {
        let kind = match d.logit_loss {
            LogitLoss::ForwardKl => "forward_kl".to_string(),
            LogitLoss::ReverseKl => "reverse_kl".to_string(),
            LogitLoss::Jsd => format!("jsd(beta={})", d.jsd_beta),
            LogitLoss::Mse => "logit_mse".to_string(),
            LogitLoss::None => unreachable!(),
        };
        let std = if d.standardize_logits { " std" } else { "" };
        parts.push(format!("{kind}×{} T={} {:?}{std}", d.logit_weight, d.temperature, d.logit_mask));
    }
    if d.feature_active() {
        let kind = match d.feature_loss {
            FeatureLoss::Cosine => "cosine",
            FeatureLoss::Mse => "feature_mse",
            FeatureLoss::None => unreachable!(),
        };
        parts.push(format!("{kind}×{} layers={:?}", d.feature_weight, d.feature_layers));
    }
    if d.affinity_active() {
        let kind = match d.affinity_loss {
            AffinityLoss::Attention => format!("attention({:?})", d.attention_group),
            AffinityLoss::Similarity => "similarity".to_string(),
            AffinityLoss::None => unreachable!(),
        };
        parts.push(format!("{kind}×{}", d.affinity_weight));
    }
    if parts.is_empty() {
        "ce only".to_string()
    } else {
        parts.join(", ")
    }
}

/// Fixed inputs shared by every run of a matrix.
pub struct AblationSetup<'a> {
    /// Stage-1 checkpoint every student starts from.
    pub student: &'a TransformerLM,
    pub teacher: &'a TransformerLM,
    pub vocab: &'a Vocabulary,
    pub train: &'a [Conversation],
    pub eval: &'a [PreparedSample],
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum DataKey {
    Original,
    Teacher,
    Student(u64, u64),
}

impl DataKey {
    fn of(e: &AblationEntry, seed: u64) -> Self {
        match e.data {
            DataSource::Original => DataKey::Original,
            DataSource::TeacherRegenerated => DataKey::Teacher,
            DataSource::StudentRegenerated => DataKey::Student(e.rho.to_bits(), seed),
        }
    }
}

struct Job {
    entry: usize,
    seed: u64,
    data: DataKey,
    cache: Option<usize>,
}

/// Trains and scores every (entry, seed) pair. Rows follow the resolved entry
/// order and runs follow `matrix.seeds`, so the report does not depend on the
/// executor.
pub fn run_ablation<E: Executor>(exec: &E, setup: &AblationSetup<'_>, matrix: &AblationMatrix) -> Result<AblationReport> {
    let entries = matrix.resolved()?;
    if setup.train_config.stage != Stage::Finetune {
        return Err(Error::Config("ablation runs need stage = finetune".into()));
    }
    if setup.eval.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let visual = &setup.student.spec.visual;
    let limit = setup.train_config.max_samples.unwrap_or(usize::MAX).min(setup.train.len());
    let train = &setup.train[..limit];

    let mut datasets: BTreeMap<DataKey, Vec<PreparedSample>> = BTreeMap::new();
    for e in &entries {
        for &seed in &matrix.seeds {
            let key = DataKey::of(e, seed);
            if datasets.contains_key(&key) {
                continue;
            }
            let convs = match key {
                DataKey::Original => train.to_vec(),
                DataKey::Teacher => {
                    regenerate_with_teacher(exec, train, setup.teacher, setup.vocab, DEFAULT_MAX_ANSWER_TOKENS)?.0
                }
                DataKey::Student(_, seed) => {
                    regenerate_with_student(exec, train, setup.student, setup.vocab, e.rho, seed, DEFAULT_MAX_ANSWER_TOKENS)?.0
                }
            };
            datasets.insert(key, prepare(exec, setup.vocab, &convs, visual)?);
        }
    }

    let mut specs: Vec<(DataKey, TargetSpec)> = Vec::new();
    let mut jobs = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        for &seed in &matrix.seeds {
            let key = DataKey::of(e, seed);
            let mut cache = None;
            if setup.train_config.teacher_cache {
                let spec = TargetSpec::new(
                    &e.distill,
                    setup.student.spec.num_layers,
                    setup.teacher.spec.num_layers,
                    &datasets[&key],
                )?;
                if !spec.is_empty() {
                    let k = specs.iter().position(|(d, s)| *d == key && *s == spec).unwrap_or_else(|| {
                        specs.push((key, spec));
                        specs.len() - 1
                    });
                    cache = Some(k);
                }
            }
            jobs.push(Job {
                entry: i,
                seed,
                data: key,
                cache,
            });
        }
    }
    let caches: Vec<Vec<TeacherTargets>> = specs
        .iter()
        .map(|(key, spec)| build_cache(exec, setup.teacher, &datasets[key], spec))
        .collect::<Result<_>>()?;

    let teacher_preds: Vec<Generation> = predict(exec, setup.teacher, setup.eval)?;
    let teacher_accuracy = evaluate(exec, setup.teacher, setup.vocab, setup.eval, None)?.accuracy;

    let reports: Vec<Result<EvalReport>> = exec.map(jobs.len(), |j| {
        let job = &jobs[j];
        let e = &entries[job.entry];
        let cfg = TrainConfig {
            seed: job.seed,
            ..setup.train_config.clone()
        };
        let data = &datasets[&job.data];
        let teacher = (e.distill.uses_teacher() || e.data == DataSource::StudentRegenerated).then_some(setup.teacher);
        let mut s = Session::new(setup.student.clone(), teacher, data, cfg, e.distill.clone())?;
        if let Some(k) = job.cache {
            s = s.with_cache(&caches[k])?;
        }
        s.run(exec)?;
        let out = s.finish()?;
        evaluate(exec, &out.model, setup.vocab, setup.eval, Some(&teacher_preds))
    });

    let mut reports = reports.into_iter();
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let runs = reports.by_ref().take(matrix.seeds.len()).collect::<Result<Vec<_>>>()?;
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let agr: Vec<f64> = runs.iter().map(|r| r.agreement.unwrap_or(0.0)).collect();
        let loss: Vec<f64> = runs.iter().map(|r| r.heldout_loss).collect();
        let avg: Vec<f64> = acc.iter().zip(&agr).map(|(a, b)| (a + b) / 2.0).collect();
        rows.push(AblationRow {
            name: e.name.clone(),
            summary: summarize(&e.distill),
            data: e.data,
            seeds: matrix.seeds.clone(),
            runs,
            accuracy: Stat::of(&acc),
            agreement: Stat::of(&agr),
            heldout_loss: Stat::of(&loss),
            avg: Stat::of(&avg),
        });
    }
    Ok(AblationReport {
        eval_samples: setup.eval.len(),
        teacher_accuracy,
        rows,
    })
}
