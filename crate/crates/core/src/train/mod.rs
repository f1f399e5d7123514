//! Two-stage training: projector pretraining and distillation fine-tuning.

mod config;
mod freeze;
mod optim;
mod runlog;
mod sample;
mod schedule;
mod session;
mod targets;

pub use config::{LrSchedule, Stage, TrainConfig};
pub use freeze::{fingerprint, Fingerprint, ModelFingerprint};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamState, AdamWConfig};
pub use runlog::{EpochRecord, RunLog, StepRecord};
pub use sample::{prepare, prepare_sample, PreparedSample};
pub use schedule::{cosine_with_warmup, lr_schedule, warmup_steps};
pub use session::{
    distill_stage2, epoch_order, finetune, projector_seed, train_stage1, Session, TrainOutcome, TrainState,
};
pub use targets::{build_cache, teacher_targets, TargetSpec, TeacherTargets};
