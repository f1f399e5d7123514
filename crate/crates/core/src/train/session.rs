use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::freeze::ModelFingerprint;
use super::optim::{adamw_step, clip_global_norm, AdamState};
use super::runlog::{EpochRecord, RunLog, StepRecord};
use super::sample::PreparedSample;
use super::schedule::lr_schedule;
use super::targets::{build_cache, teacher_targets, TargetSpec, TeacherTargets};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::losses::{
    attention_map_loss, autoregressive_ce, ce_rows, compose, feature_rows, head_mean, kl_rows, layer_pairs, similarity_matrix,
    similarity_mse, AffinityLoss, Component, DistillConfig, FeatureLoss, FeatureMetric, FeatureProjector, KlDirection,
    LogitLoss, LogitOptions, ProjectorVars,
};
use crate::model::{LmOutputs, LmParams, ModelSpec, ParamGroup, TransformerLM};

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: TransformerLM,
    pub projectors: Vec<FeatureProjector>,
    pub adam: AdamState,
    pub step: usize,
    pub log: RunLog,
}

/// Result of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TransformerLM,
    /// Feature projectors; training-only and discarded for inference.
    pub projectors: Vec<FeatureProjector>,
    pub log: RunLog,
}

/// Samples whose gradients one worker accumulates sequentially. Fixed, so
/// results do not depend on the number of workers.
const GRAD_CHUNK: usize = 4;

struct SampleOut {
    loss: f64,
    values: Vec<(Component, f64)>,
}

/// Logit rows a sample's losses read; the head runs only on their union.
struct LogitRows {
    ce: Option<Vec<usize>>,
    logit: Vec<usize>,
    all: Vec<usize>,
}

impl LogitRows {
    fn new(ce: Option<Vec<usize>>, logit: Vec<usize>) -> Self {
        let mut all: Vec<usize> = ce.iter().flatten().chain(&logit).copied().collect();
        all.sort_unstable();
        all.dedup();
        Self { ce, logit, all }
    }

    fn local(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|r| self.all.binary_search(r).unwrap_or(0)).collect()
    }
}

/// Sample order of `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Seed of the `k`-th feature projector of a run.
pub fn projector_seed(seed: u64, k: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1))
}

/// One training run, stepped explicitly or driven to completion.
///
/// Each sample of a batch gets its own graph; per-sample gradients are
/// summed in sample order and averaged, so results do not depend on the
/// executor.
pub struct Session<'a> {
    cfg: TrainConfig,
    distill: DistillConfig,
    regen_distill: DistillConfig,
    teacher: Option<&'a TransformerLM>,
    data: &'a [PreparedSample],
    heldout: &'a [PreparedSample],
    heldout_teacher: Vec<Tensor>,
    spec: Option<TargetSpec>,
    cache: Option<Cow<'a, [TeacherTargets]>>,
    trainable: Vec<bool>,
    state: TrainState,
    before: ModelFingerprint,
    teacher_before: Option<ModelFingerprint>,
}

impl<'a> Session<'a> {
    /// Starts a run from `student`. A teacher is required for any active
    /// distillation term and for student-regenerated samples.
    pub fn new(
        student: TransformerLM,
        teacher: Option<&'a TransformerLM>,
        data: &'a [PreparedSample],
        cfg: TrainConfig,
        distill: DistillConfig,
    ) -> Result<Self> {
        let projectors = if distill.feature_active() {
            let d_t = teacher
                .map(|t| t.spec.hidden_dim)
                .ok_or_else(|| Error::Config("feature distillation needs a teacher".into()))?;
            (0..distill.feature_layers.len())
                .map(|k| FeatureProjector::new(student.spec.hidden_dim, d_t, projector_seed(cfg.seed, k)))
                .collect()
        } else {
            Vec::new()
        };
        let adam_sizes = Self::slot_sizes(&student, &projectors, cfg.stage);
        let state = TrainState {
            model: student,
            projectors,
            adam: AdamState::new(&adam_sizes),
            step: 0,
            log: RunLog::default(),
        };
        Self::resume(state, teacher, data, cfg, distill)
    }

    /// Continues from a saved [`TrainState`].
    pub fn resume(
        state: TrainState,
        teacher: Option<&'a TransformerLM>,
        data: &'a [PreparedSample],
        cfg: TrainConfig,
        distill: DistillConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        distill.validate()?;
        let student = &state.model;
        if cfg.stage == Stage::Pretrain && distill.uses_teacher() {
            return Err(Error::Config(
                "distillation terms are not allowed in the pretraining stage".into(),
            ));
        }
        let regen = data.iter().any(|s| s.provenance == Provenance::StudentRegenerated);
        if (distill.uses_teacher() || regen) && teacher.is_none() {
            return Err(Error::Config("distillation needs a teacher".into()));
        }
        if let Some(t) = teacher {
            ModelSpec::check_pair(&t.spec, &student.spec)?;
            if t.spec.visual.num_tokens() != student.spec.visual.num_tokens() {
                return Err(Error::Config("teacher and student use different visual token counts".into()));
            }
            distill.validate_layers(student.spec.num_layers, t.spec.num_layers)?;
        }
        let n = cfg.max_samples.map_or(data.len(), |m| m.min(data.len()));
        if n == 0 {
            return Err(Error::Contract("empty training set".into()));
        }
        let data = &data[..n];
        let expected = Self::slot_sizes(student, &state.projectors, cfg.stage);
        let have: Vec<usize> = state.adam.m.iter().map(|m| m.len()).collect();
        if expected != have {
            return Err(Error::Contract("optimizer state does not match the trainable parameters".into()));
        }
        let spec = match teacher {
            Some(t) => Some(TargetSpec::new(&distill, student.spec.num_layers, t.spec.num_layers, data)?),
            None => None,
        };
        let trainable = student
            .params
            .entries()
            .iter()
            .map(|(name, _)| Self::is_trainable(cfg.stage, LmParams::<Tensor>::group_of(name)))
            .collect();
        let mut regen_distill = distill.clone();
        regen_distill.ce_weight = 0.0;
        if !regen_distill.logit_active() {
            regen_distill.logit_loss = LogitLoss::ForwardKl;
            regen_distill.logit_weight = 1.0;
        }
        Ok(Self {
            before: ModelFingerprint::of(student),
            teacher_before: teacher.map(ModelFingerprint::of),
            cfg,
            distill,
            regen_distill,
            teacher,
            data,
            heldout: &[],
            heldout_teacher: Vec::new(),
            spec,
            cache: None,
            trainable,
            state,
        })
    }

    fn is_trainable(stage: Stage, group: ParamGroup) -> bool {
        match stage {
            Stage::Pretrain => group == ParamGroup::Projector,
            Stage::Finetune => true,
        }
    }

    fn slot_sizes(student: &TransformerLM, projectors: &[FeatureProjector], stage: Stage) -> Vec<usize> {
        let mut sizes: Vec<usize> = student
            .params
            .entries()
            .iter()
            .filter(|(n, _)| Self::is_trainable(stage, LmParams::<Tensor>::group_of(n)))
            .map(|(_, t)| t.len())
            .collect();
        for p in projectors {
            sizes.extend(p.tensors().iter().map(|t| t.len()));
        }
        sizes
    }

    /// Scores `heldout` before training and after every epoch.
    pub fn with_heldout(mut self, heldout: &'a [PreparedSample]) -> Result<Self> {
        let n = heldout.len().min(self.cfg.heldout_samples);
        self.heldout = &heldout[..n];
        self.heldout_teacher = match self.teacher {
            Some(t) => self
                .heldout
                .iter()
                .map(|s| {
                    let z = t.encode_visual(&s.image)?;
                    let out = t.forward_values(&z, &s.sample.ids)?;
                    Ok(out.logits.select_rows(&s.sample.answer_only.prediction_rows()))
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(self)
    }

    /// Uses precomputed teacher targets, aligned with the training data.
    pub fn with_cache(mut self, cache: &'a [TeacherTargets]) -> Result<Self> {
        if cache.len() < self.data.len() {
            return Err(Error::Contract(format!(
                "teacher cache of {} entries for {} samples",
                cache.len(),
                self.data.len()
            )));
        }
        self.cache = Some(Cow::Borrowed(&cache[..self.data.len()]));
        Ok(self)
    }

    pub fn target_spec(&self) -> Option<&TargetSpec> {
        self.spec.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size())
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &TransformerLM {
        &self.state.model
    }

    fn ensure_cache<E: Executor>(&mut self, exec: &E) -> Result<()> {
        if self.cache.is_some() || !self.cfg.teacher_cache {
            return Ok(());
        }
        if let (Some(t), Some(spec)) = (self.teacher, &self.spec) {
            if !spec.is_empty() {
                self.cache = Some(Cow::Owned(build_cache(exec, t, self.data, spec)?));
            }
        }
        Ok(())
    }

    fn targets(&self, i: usize) -> Result<Cow<'_, TeacherTargets>> {
        if let Some(c) = &self.cache {
            return Ok(Cow::Borrowed(&c[i]));
        }
        match (self.teacher, &self.spec) {
            (Some(t), Some(spec)) => Ok(Cow::Owned(teacher_targets(t, &self.data[i], spec)?)),
            _ => Ok(Cow::Owned(TeacherTargets::default())),
        }
    }

    fn loss_parts(
        &self,
        g: &mut Graph<'_>,
        out: &LmOutputs,
        projectors: &[ProjectorVars],
        s: &PreparedSample,
        t: &TeacherTargets,
        cfg: &DistillConfig,
        rows: &LogitRows,
    ) -> Result<Vec<(Component, Var)>> {
        let mut parts = Vec::with_capacity(4);
        let ce = match &rows.ce {
            Some(ce) => {
                if ce.is_empty() {
                    return Err(Error::Contract("mask selects no predicted position".into()));
                }
                let targets: Vec<usize> = ce.iter().map(|&r| s.sample.ids[r + 1]).collect();
                let sel = g.select_rows(out.logits, &rows.local(ce))?;
                ce_rows(g, sel, &targets)?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        parts.push((Component::Autoregressive, ce));
        if cfg.logit_active() {
            let target = t
                .logits
                .as_ref()
                .ok_or_else(|| Error::Contract("missing teacher logits".into()))?;
            let sl = g.select_rows(out.logits, &rows.local(&rows.logit))?;
            parts.push((Component::Logit, cfg.logit_rows(g, cfg.logit_loss, target, sl)?));
        }
        if cfg.feature_active() {
            let metric = match cfg.feature_loss {
                FeatureLoss::Mse => FeatureMetric::Mse,
                _ => FeatureMetric::Cosine,
            };
            let pos = s.sample.mask(cfg.feature_mask).positions();
            if pos.is_empty() {
                return Err(Error::Contract("feature mask selects no position".into()));
            }
            let pairs = layer_pairs(&cfg.feature_layers, out.hidden_states.len(), usize::MAX)?;
            let mut acc: Option<Var> = None;
            for (k, ((sl, _), target)) in pairs.iter().zip(&t.hidden).enumerate() {
                let hs = g.select_rows(out.hidden_states[*sl], &pos)?;
                let term = feature_rows(g, hs, target, Some(&projectors[k]), metric)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            let acc = acc.ok_or_else(|| Error::Contract("missing teacher hidden states".into()))?;
            parts.push((Component::Feature, g.scale(acc, 1.0 / pairs.len() as f64)));
        }
        if cfg.affinity_active() {
            let v = match cfg.affinity_loss {
                AffinityLoss::Attention => {
                    let heads = out.attention.last().ok_or_else(|| Error::Contract("no layers".into()))?;
                    let smap = head_mean(g, heads)?;
                    let target = t
                        .attention
                        .as_ref()
                        .ok_or_else(|| Error::Contract("missing teacher attention".into()))?;
                    attention_map_loss(g, smap, target, cfg.attention_group, &s.layout)?
                }
                _ => {
                    let h = *out.hidden_states.last().ok_or_else(|| Error::Contract("no layers".into()))?;
                    let sm = similarity_matrix(g, h, s.layout.image, &s.text)?;
                    let target = t
                        .similarity
                        .as_ref()
                        .ok_or_else(|| Error::Contract("missing teacher similarity".into()))?;
                    similarity_mse(g, sm, target)?
                }
            };
            parts.push((Component::Affinity, v));
        }
        Ok(parts)
    }

    /// Forward and backward of sample `i`, adding its gradients into `bufs`.
    fn sample_out(&self, i: usize, bufs: &mut Vec<Vec<f64>>) -> Result<SampleOut> {
        let s = &self.data[i];
        let model = &self.state.model;
        let stage = self.cfg.stage;
        let regen = s.provenance == Provenance::StudentRegenerated;
        let cfg = if regen { &self.regen_distill } else { &self.distill };
        let targets = if cfg.uses_teacher() {
            self.targets(i)?
        } else {
            Cow::Owned(TeacherTargets::default())
        };

        let mut g = Graph::new();
        let vars = model.bind(&mut g, |grp| Self::is_trainable(stage, grp));
        let pvars: Vec<ProjectorVars> = self.state.projectors.iter().map(|p| p.bind(&mut g, true)).collect();
        let mut leaves: Vec<Var> = vars
            .entries()
            .iter()
            .zip(&self.trainable)
            .filter_map(|((_, v), &tr)| tr.then_some(**v))
            .collect();
        for p in &pvars {
            leaves.extend([p.w1, p.b1, p.w2, p.b2]);
        }
        for (&v, buf) in leaves.iter().zip(bufs.iter_mut()) {
            g.accumulate_into(v, core::mem::take(buf))?;
        }
        let z = g.constant(model.encode_visual(&s.image)?);
        let hv = model.project_visual(&mut g, &vars, z)?;
        let rows = LogitRows::new(
            (!regen).then(|| s.sample.mask(self.cfg.ce_mask).prediction_rows()),
            if cfg.logit_active() {
                s.sample.mask(cfg.logit_mask).prediction_rows()
            } else {
                Vec::new()
            },
        );
        let out = model.forward_rows(&mut g, &vars, hv, &s.sample.ids, (!rows.all.is_empty()).then_some(&rows.all[..]))?;
        let parts = self.loss_parts(&mut g, &out, &pvars, s, &targets, cfg, &rows)?;
        let composed = compose(&mut g, cfg, &parts)?;
        let loss = g.item(composed.total);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} on sample {i}")));
        }
        g.backward(composed.total)?;
        for (&v, buf) in leaves.iter().zip(bufs.iter_mut()) {
            *buf = g.take_grad(v).ok_or_else(|| Error::Contract("gradient buffer lost".into()))?;
        }
        let values = composed.values.into_iter().filter(|(c, _)| cfg.is_active(*c)).collect();
        Ok(SampleOut { loss, values })
    }

    /// Gradient sums of consecutive samples, accumulated in order.
    fn chunk_out(&self, idx: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<SampleOut>)> {
        let mut bufs: Vec<Vec<f64>> = self.state.adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
        let outs = idx.iter().map(|&i| self.sample_out(i, &mut bufs)).collect::<Result<_>>()?;
        Ok((bufs, outs))
    }

    /// Runs one optimizer step.
    pub fn step<E: Executor>(&mut self, exec: &E) -> Result<()> {
        if self.is_done() {
            return Err(Error::Contract("run already finished".into()));
        }
        self.ensure_cache(exec)?;
        if self.state.step == 0 && self.state.log.epochs.is_empty() {
            self.record_epoch(exec, 0)?;
        }
        let spe = self.steps_per_epoch();
        let bs = self.cfg.batch_size();
        let epoch = self.state.step / spe;
        let b = self.state.step % spe;
        let order = epoch_order(self.data.len(), self.cfg.seed, epoch);
        let idx = &order[b * bs..((b + 1) * bs).min(order.len())];

        let chunks: Vec<&[usize]> = idx.chunks(GRAD_CHUNK).collect();
        let outs = exec.map(chunks.len(), |k| self.chunk_out(chunks[k]));
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut loss = 0.0;
        let mut comps: BTreeMap<String, f64> = BTreeMap::new();
        for o in outs {
            let (g, samples) = o?;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, g) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
                }
            }
            for o in samples {
                loss += o.loss;
                for (c, v) in o.values {
                    *comps.entry(c.name().into()).or_insert(0.0) += v;
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        comps.values_mut().for_each(|v| *v *= inv);
        if self.cfg.clip_grad {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        let lr = lr_schedule(self.state.step + 1, self.total_steps(), &self.cfg)?;
        {
            let TrainState {
                model,
                projectors,
                adam,
                ..
            } = &mut self.state;
            let mut params: Vec<&mut Tensor> = model
                .params
                .values_mut()
                .into_iter()
                .zip(&self.trainable)
                .filter_map(|(p, &t)| t.then_some(p))
                .collect();
            for p in projectors.iter_mut() {
                params.extend(p.tensors_mut());
            }
            adamw_step(&mut params, &grads, adam, lr, &self.cfg.adamw())?;
        }
        self.state.log.steps.push(StepRecord {
            step: self.state.step,
            epoch,
            lr,
            loss: loss * inv,
            components: comps,
        });
        self.state.step += 1;
        if self.state.step.is_multiple_of(spe) {
            self.record_epoch(exec, self.state.step / spe)?;
        }
        Ok(())
    }

    fn record_epoch<E: Executor>(&mut self, exec: &E, epoch: usize) -> Result<()> {
        if self.heldout.is_empty() {
            return Ok(());
        }
        let (ce, kl) = self.heldout_metrics(exec)?;
        self.state.log.epochs.push(EpochRecord {
            epoch,
            step: self.state.step,
            heldout_ce: ce,
            heldout_forward_kl: kl,
        });
        Ok(())
    }

    /// Mean answer-token cross entropy on the held-out samples and, with a
    /// teacher, mean forward KL to it at the configured temperature.
    pub fn heldout_metrics<E: Executor>(&self, exec: &E) -> Result<(f64, Option<f64>)> {
        let model = &self.state.model;
        let has_teacher = !self.heldout_teacher.is_empty();
        let opts = LogitOptions {
            temperature: self.distill.temperature,
            standardize: false,
            scale_t2: self.distill.kl_scale_t2,
        };
        let vals = exec.map(self.heldout.len(), |i| -> Result<(f64, f64)> {
            let s = &self.heldout[i];
            let mut g = Graph::new();
            let vars = model.bind(&mut g, |_| false);
            let z = g.constant(model.encode_visual(&s.image)?);
            let hv = model.project_visual(&mut g, &vars, z)?;
            let out = model.forward(&mut g, &vars, hv, &s.sample.ids)?;
            let ce = autoregressive_ce(&mut g, out.logits, &s.sample.ids, &s.sample.answer_only)?;
            let ce = g.item(ce);
            let kl = if has_teacher {
                let rows = s.sample.answer_only.prediction_rows();
                let sl = g.select_rows(out.logits, &rows)?;
                let k = kl_rows(&mut g, &self.heldout_teacher[i], sl, KlDirection::Forward, &opts)?;
                g.item(k)
            } else {
                0.0
            };
            Ok((ce, kl))
        });
        let mut ce = 0.0;
        let mut kl = 0.0;
        for v in vals {
            let (c, k) = v?;
            ce += c;
            kl += k;
        }
        let n = self.heldout.len() as f64;
        Ok((ce / n, has_teacher.then_some(kl / n)))
    }

    /// Steps until the run is complete.
    pub fn run<E: Executor>(&mut self, exec: &E) -> Result<()> {
        while !self.is_done() {
            self.step(exec)?;
        }
        Ok(())
    }

    /// Checks the freeze contracts and returns the trained model.
    pub fn finish(self) -> Result<TrainOutcome> {
        let after = ModelFingerprint::of(&self.state.model);
        if after.encoder != self.before.encoder {
            return Err(Error::Contract("visual encoder changed during training".into()));
        }
        if self.cfg.stage == Stage::Pretrain && after.language != self.before.language {
            return Err(Error::Contract("language model changed during projector pretraining".into()));
        }
        if let (Some(t), Some(b)) = (self.teacher, self.teacher_before) {
            if ModelFingerprint::of(t) != b {
                return Err(Error::Contract("teacher changed during distillation".into()));
            }
        }
        Ok(TrainOutcome {
            model: self.state.model,
            projectors: self.state.projectors,
            log: self.state.log,
        })
    }
}

/// Stage 1: trains only the projector with cross entropy on captions.
pub fn train_stage1<E: Executor>(
    exec: &E,
    model: TransformerLM,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("stage 1 needs stage = pretrain".into()));
    }
    if distill.uses_teacher() {
        return Err(Error::Config(
            "distillation terms are not allowed in the pretraining stage".into(),
        ));
    }
    let mut s = Session::new(model, None, data, cfg.clone(), distill.clone())?;
    s.run(exec)?;
    s.finish()
}

/// Plain fine-tuning of projector and language model with cross entropy.
pub fn finetune<E: Executor>(
    exec: &E,
    model: TransformerLM,
    data: &[PreparedSample],
    heldout: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("fine-tuning needs stage = finetune".into()));
    }
    let mut s = Session::new(model, None, data, cfg.clone(), DistillConfig::default())?.with_heldout(heldout)?;
    s.run(exec)?;
    s.finish()
}

/// Stage 2: fine-tunes `student` against a frozen `teacher` with the active
/// terms of `distill`.
pub fn distill_stage2<E: Executor>(
    exec: &E,
    student: TransformerLM,
    teacher: &TransformerLM,
    data: &[PreparedSample],
    heldout: &[PreparedSample],
    cfg: &TrainConfig,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("distillation needs stage = finetune".into()));
    }
    let mut s = Session::new(student, Some(teacher), data, cfg.clone(), distill.clone())?.with_heldout(heldout)?;
    s.run(exec)?;
    s.finish()
}
