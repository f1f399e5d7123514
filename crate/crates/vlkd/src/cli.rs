//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vlkd_core::ablation::{run_ablation, AblationMatrix, AblationSetup};
use vlkd_core::data::{generate_split, Conversation, Split, Vocabulary};
use vlkd_core::eval::evaluate;
use vlkd_core::model::TransformerLM;
use vlkd_core::train::{prepare, PreparedSample, Session, Stage, TrainConfig};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pool::Pool;
use crate::presets::{self, Preset};
use crate::report::{self, Format};
use crate::{checkpoint, dataset, gradcheck, runlog};

#[derive(Debug, Parser)]
#[command(name = "vlkd", version, about = "Teacher-student distillation for toy visual-prefix language models")]
pub struct Cli {
    /// Experiment config (TOML with [model], [data], [train], [distill]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the data seed for gen-data and the training seed elsewhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 means one per core.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the gen-data files; defaults to --out.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write a resumable state checkpoint every N steps.
    #[arg(long)]
    pub save_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the pretrain, train and eval datasets.
    GenData,
    /// Stage 1: train only the projector on captions.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Plain fine-tuning with cross entropy.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 2: fine-tuning against a frozen teacher.
    Distill {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Also report agreement with this teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run an ablation matrix from a shared stage-1 student.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Matrix file (TOML with `seeds` and `[[entries]]`).
        #[arg(long, conflicts_with = "preset")]
        matrix: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Logits)]
        preset: Preset,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Finite-difference check of every operation and loss.
    Gradcheck,
}

struct Ctx {
    cfg: ExperimentConfig,
    cfg_text: String,
    seed: Option<u64>,
    out: PathBuf,
    pool: Pool,
}

impl Ctx {
    fn data_dir(&self, a: &DataArgs) -> PathBuf {
        a.data.clone().unwrap_or_else(|| self.out.clone())
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut t = self.cfg.train.clone();
        t.stage = stage;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    fn meta(&self, command: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), command.to_string()),
            ("config".to_string(), self.cfg_text.clone()),
        ])
    }

    fn read(&self, a: &DataArgs, split: Split) -> Result<Vec<Conversation>> {
        dataset::read(&self.data_dir(a).join(dataset::file_name(split)), split)
    }

    fn prepared(&self, vocab: &Vocabulary, convs: &[Conversation], model: &TransformerLM) -> Result<Vec<PreparedSample>> {
        Ok(prepare(&self.pool, vocab, convs, &model.spec.visual)?)
    }
}

pub fn run(cli: Cli) -> Result<String> {
    let (cfg, cfg_text) = match &cli.config {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            let t = c.to_toml();
            (c, t)
        }
        None => (ExperimentConfig::default(), ExperimentConfig::default().to_toml()),
    };
    let ctx = Ctx {
        cfg,
        cfg_text,
        seed: cli.seed,
        out: cli.out,
        pool: Pool::new(cli.workers)?,
    };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pretrain { data, init } => pretrain(&ctx, &data, init.as_deref()),
        Command::Train { data, init, run } => train(&ctx, &data, init.as_deref(), None, &run),
        Command::Distill {
            data,
            student,
            teacher,
            run,
        } => train(&ctx, &data, Some(&student), Some(&teacher), &run),
        Command::Eval {
            data,
            model,
            teacher,
            format,
        } => eval(&ctx, &data, &model, teacher.as_deref(), format),
        Command::Ablate {
            data,
            student,
            teacher,
            matrix,
            preset,
            format,
        } => ablate(&ctx, &data, &student, &teacher, matrix.as_deref(), preset, format),
        Command::Gradcheck => {
            let s = gradcheck::run_suite()?;
            let t = s.table();
            if s.passed() {
                Ok(t)
            } else {
                let w = s.worst().expect("non-empty");
                Err(Error::Check(format!("{t}worst: {} at {:.3e}", w.name, w.max_rel_error)))
            }
        }
    }
}

fn gen_data(ctx: &Ctx) -> Result<String> {
    let mut d = ctx.cfg.data.clone();
    if let Some(s) = ctx.seed {
        d.seed = s;
    }
    let mut msg = String::new();
    for (split, n) in [(Split::Pretrain, d.pretrain_size), (Split::Train, d.train_size), (Split::Eval, d.eval_size)] {
        let convs = generate_split(&d, split, n)?;
        let p = ctx.out.join(dataset::file_name(split));
        dataset::write(&p, split, &convs)?;
        msg.push_str(&format!("wrote {} records to {}\n", convs.len(), p.display()));
    }
    Ok(msg)
}

fn load_or_build(ctx: &Ctx, init: Option<&Path>) -> Result<TransformerLM> {
    match init {
        Some(p) => checkpoint::load_model(p),
        None => ctx.cfg.model.build(),
    }
}

fn pretrain(ctx: &Ctx, data: &DataArgs, init: Option<&Path>) -> Result<String> {
    let model = load_or_build(ctx, init)?;
    let vocab = Vocabulary::new(model.spec.vocab_size)?;
    let convs = ctx.read(data, Split::Pretrain)?;
    let prepared = ctx.prepared(&vocab, &convs, &model)?;
    let cfg = ctx.train_config(Stage::Pretrain);
    let mut s = Session::new(model, None, &prepared, cfg, ctx.cfg.distill.clone())?;
    s.run(&ctx.pool)?;
    let out = s.finish()?;
    finish_run(ctx, "pretrain", &out.model, out.log)
}

fn finish_run(ctx: &Ctx, name: &str, model: &TransformerLM, mut log: vlkd_core::train::RunLog) -> Result<String> {
    let ckpt = ctx.out.join(format!("{name}.ckpt"));
    checkpoint::save_model(&ckpt, model, &ctx.meta(name))?;
    log.checkpoint = Some(ckpt.display().to_string());
    let rl = ctx.out.join(format!("{name}.runlog.jsonl"));
    runlog::write(&rl, &log)?;
    let last = log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "{} steps, final loss {last:.4}\nwrote {}\nwrote {}\n",
        log.steps.len(),
        ckpt.display(),
        rl.display()
    ))
}

fn train(ctx: &Ctx, data: &DataArgs, init: Option<&Path>, teacher: Option<&Path>, run: &RunArgs) -> Result<String> {
    let name = if teacher.is_some() { "distill" } else { "train" };
    let teacher = teacher.map(checkpoint::load_model).transpose()?;
    let resumed = match &run.resume {
        Some(p) => Some(
            checkpoint::load(p)?
                .state
                .ok_or_else(|| Error::format(p, "checkpoint holds no training state"))?,
        ),
        None => None,
    };
    let model = match &resumed {
        Some(s) => s.model.clone(),
        None => load_or_build(ctx, init)?,
    };
    let vocab = Vocabulary::new(model.spec.vocab_size)?;
    let train = ctx.prepared(&vocab, &ctx.read(data, Split::Train)?, &model)?;
    let mut cfg = ctx.train_config(Stage::Finetune);
    let eval = ctx.read(data, Split::Eval)?;
    let held: Vec<Conversation> = eval.into_iter().take(cfg.heldout_samples).collect();
    let held = ctx.prepared(&vocab, &held, &model)?;
    let distill = if teacher.is_some() {
        ctx.cfg.distill.clone()
    } else {
        vlkd_core::losses::DistillConfig::default()
    };
    if teacher.is_none() && ctx.cfg.distill.uses_teacher() {
        return Err(vlkd_core::Error::Config("train runs without a teacher; use distill for distillation terms".into()).into());
    }
    if held.is_empty() {
        cfg.heldout_samples = 0;
    }
    let mut s = match resumed {
        Some(state) => Session::resume(state, teacher.as_ref(), &train, cfg, distill)?,
        None => Session::new(model, teacher.as_ref(), &train, cfg, distill)?,
    };
    if !held.is_empty() {
        s = s.with_heldout(&held)?;
    }
    let state_path = ctx.out.join(format!("{name}.state.ckpt"));
    while !s.is_done() {
        s.step(&ctx.pool)?;
        if let Some(k) = run.save_every.filter(|&k| k > 0) {
            if s.step_index() % k == 0 && !s.is_done() {
                checkpoint::save_state(&state_path, s.state(), &ctx.meta(name))?;
            }
        }
    }
    let out = s.finish()?;
    finish_run(ctx, name, &out.model, out.log)
}

fn eval(ctx: &Ctx, data: &DataArgs, model: &Path, teacher: Option<&Path>, format: Format) -> Result<String> {
    let m = checkpoint::load_model(model)?;
    let vocab = Vocabulary::new(m.spec.vocab_size)?;
    let eval = ctx.prepared(&vocab, &ctx.read(data, Split::Eval)?, &m)?;
    let preds = match teacher {
        Some(p) => {
            let t = checkpoint::load_model(p)?;
            if t.spec.vocab_size != m.spec.vocab_size {
                return Err(vlkd_core::Error::Config(format!(
                    "teacher vocabulary {} differs from model vocabulary {}",
                    t.spec.vocab_size, m.spec.vocab_size
                ))
                .into());
            }
            Some(vlkd_core::eval::predict(&ctx.pool, &t, &eval)?)
        }
        None => None,
    };
    let r = evaluate(&ctx.pool, &m, &vocab, &eval, preds.as_deref())?;
    let name = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let text = report::render_eval(name, &r, format);
    report::write(&ctx.out.join(format!("eval.{}", format.extension())), &text)?;
    Ok(text)
}

fn ablate(
    ctx: &Ctx,
    data: &DataArgs,
    student: &Path,
    teacher: &Path,
    matrix: Option<&Path>,
    preset: Preset,
    format: Format,
) -> Result<String> {
    let mut m = match matrix {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<AblationMatrix>(&text).map_err(|e| Error::Config {
                path: p.into(),
                msg: e.to_string(),
            })?
        }
        None => presets::matrix(preset),
    };
    if let Some(s) = ctx.seed {
        let n = m.seeds.len() as u64;
        m.seeds = (s..s + n).collect();
    }
    let student = checkpoint::load_model(student)?;
    let teacher = checkpoint::load_model(teacher)?;
    let vocab = Vocabulary::new(student.spec.vocab_size)?;
    let train = ctx.read(data, Split::Train)?;
    let eval = ctx.prepared(&vocab, &ctx.read(data, Split::Eval)?, &student)?;
    let setup = AblationSetup {
        student: &student,
        teacher: &teacher,
        vocab: &vocab,
        train: &train,
        eval: &eval,
        train_config: ctx.train_config(Stage::Finetune),
    };
    let r = run_ablation(&ctx.pool, &setup, &m)?;
    let text = report::render_ablation(&r, format);
    report::write(&ctx.out.join(format!("ablation.{}", format.extension())), &text)?;
    Ok(text)
}
