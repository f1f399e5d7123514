use proptest::prelude::*;
use vlkd_core::data::{generate_split, DataConfig, Split, Vocabulary};
use vlkd_core::exec::Sequential;
use vlkd_core::losses::{AffinityLoss, DistillConfig, FeatureLoss, LogitLoss};
use vlkd_core::model::{ModelSpec, Role, TransformerLM, VisualEncoder};
use vlkd_core::train::*;
use vlkd_core::Error;

fn spec(role: Role, layers: usize, hidden: usize) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: 2,
        ffn_dim: 2 * hidden,
        role,
        ..ModelSpec::teacher()
    }
}

fn model(s: ModelSpec, seed: u64) -> TransformerLM {
    let enc = VisualEncoder::new(s.visual, 7).unwrap();
    TransformerLM::new(s, enc, seed).unwrap()
}

fn student() -> TransformerLM {
    model(spec(Role::Student, 2, 16), 1)
}

fn teacher() -> TransformerLM {
    model(spec(Role::Teacher, 3, 32), 2)
}

fn samples(split: Split, n: usize) -> Vec<PreparedSample> {
    let vocab = Vocabulary::new(512).unwrap();
    let convs = generate_split(&DataConfig::default(), split, n).unwrap();
    prepare(&Sequential, &vocab, &convs, &ModelSpec::teacher().visual).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: Some(8),
        learning_rate: Some(3e-3),
        epochs,
        heldout_samples: 8,
        ..TrainConfig::finetune()
    }
}

fn kl() -> DistillConfig {
    DistillConfig {
        logit_loss: LogitLoss::ForwardKl,
        ..DistillConfig::default()
    }
}

fn all_terms() -> DistillConfig {
    DistillConfig {
        feature_loss: FeatureLoss::Cosine,
        affinity_loss: AffinityLoss::Attention,
        ..kl()
    }
}

#[test]
fn stage1_changes_only_the_projector() {
    let data = samples(Split::Pretrain, 16);
    let m = student();
    let before = ModelFingerprint::of(&m);
    let c = TrainConfig {
        batch_size: Some(8),
        ..TrainConfig::pretrain()
    };
    let out = train_stage1(&Sequential, m, &data, &c, &DistillConfig::default()).unwrap();
    let after = ModelFingerprint::of(&out.model);
    assert_eq!(after.encoder, before.encoder);
    assert_eq!(after.language, before.language);
    assert_ne!(after.projector, before.projector);
}

#[test]
fn stage1_rejects_distillation_terms() {
    let data = samples(Split::Pretrain, 4);
    let e = train_stage1(&Sequential, student(), &data, &TrainConfig::pretrain(), &kl()).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn distillation_leaves_teacher_and_encoder_frozen() {
    let data = samples(Split::Train, 16);
    let t = teacher();
    let tb = ModelFingerprint::of(&t);
    let s = student();
    let sb = ModelFingerprint::of(&s);
    let out = distill_stage2(&Sequential, s, &t, &data, &data[..4], &cfg(1), &all_terms()).unwrap();
    assert_eq!(ModelFingerprint::of(&t), tb);
    let sa = ModelFingerprint::of(&out.model);
    assert_eq!(sa.encoder, sb.encoder);
    assert_ne!(sa.language, sb.language);
    assert_ne!(sa.projector, sb.projector);
}

#[test]
fn zero_weights_reduce_to_the_baseline() {
    let data = samples(Split::Train, 16);
    let t = teacher();
    let base = finetune(&Sequential, student(), &data, &[], &cfg(1)).unwrap();
    let zero = DistillConfig {
        logit_weight: 0.0,
        feature_weight: 0.0,
        affinity_weight: 0.0,
        ..all_terms()
    };
    let out = distill_stage2(&Sequential, student(), &t, &data, &[], &cfg(1), &zero).unwrap();
    assert_eq!(out.model, base.model);
    assert_eq!(out.log.losses(), base.log.losses());
}

#[test]
fn fixed_seed_runs_are_identical() {
    let data = samples(Split::Train, 16);
    let t = teacher();
    let run = || distill_stage2(&Sequential, student(), &t, &data, &data[..4], &cfg(2), &all_terms()).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let other = distill_stage2(
        &Sequential,
        student(),
        &t,
        &data,
        &data[..4],
        &TrainConfig { seed: 9, ..cfg(2) },
        &all_terms(),
    )
    .unwrap();
    assert_ne!(other.log, a.log);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = samples(Split::Train, 24);
    let t = teacher();
    let mut full = Session::new(student(), Some(&t), &data, cfg(2), all_terms()).unwrap();
    full.run(&Sequential).unwrap();
    let full = full.finish().unwrap();

    let mut first = Session::new(student(), Some(&t), &data, cfg(2), all_terms()).unwrap();
    for _ in 0..4 {
        first.step(&Sequential).unwrap();
    }
    let saved = first.state().clone();
    drop(first);
    let mut second = Session::resume(saved, Some(&t), &data, cfg(2), all_terms()).unwrap();
    assert_eq!(second.step_index(), 4);
    second.run(&Sequential).unwrap();
    let resumed = second.finish().unwrap();
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.projectors, full.projectors);
    assert_eq!(resumed.log, full.log);
}

#[test]
fn vocabulary_mismatch_is_a_config_error() {
    let data = samples(Split::Train, 4);
    let t = model(
        ModelSpec {
            vocab_size: 600,
            ..spec(Role::Teacher, 3, 32)
        },
        2,
    );
    let e = Session::new(student(), Some(&t), &data, cfg(1), kl()).err().unwrap();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn distillation_without_teacher_is_a_config_error() {
    let data = samples(Split::Train, 4);
    let e = Session::new(student(), None, &data, cfg(1), kl()).err().unwrap();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn overfits_one_sample() {
    let data = samples(Split::Train, 1);
    let c = TrainConfig {
        batch_size: Some(1),
        learning_rate: Some(1e-2),
        schedule: LrSchedule::Constant,
        epochs: 80,
        ..TrainConfig::finetune()
    };
    let out = finetune(&Sequential, student(), &data, &[], &c).unwrap();
    let l = out.log.losses();
    assert!(l[l.len() - 1] < 0.05, "final loss {}", l[l.len() - 1]);
}

#[test]
fn moving_average_loss_decreases() {
    let data = samples(Split::Train, 160);
    let c = TrainConfig {
        learning_rate: Some(1e-2),
        ..cfg(1)
    };
    let out = finetune(&Sequential, student(), &data, &[], &c).unwrap();
    let ma = out.log.moving_average(10);
    assert!(ma.last().unwrap() < ma.first().unwrap(), "{ma:?}");
}

#[test]
fn heldout_forward_kl_decreases_across_seeds() {
    let data = samples(Split::Train, 48);
    let heldout = samples(Split::Eval, 8);
    let t = teacher();
    for seed in 0..3 {
        let c = TrainConfig { seed, ..cfg(3) };
        let out = distill_stage2(&Sequential, model(spec(Role::Student, 2, 16), seed + 1), &t, &data, &heldout, &c, &kl()).unwrap();
        let e = &out.log.epochs;
        assert_eq!(e.len(), 4);
        let first = e[0].heldout_forward_kl.unwrap();
        let last = e[e.len() - 1].heldout_forward_kl.unwrap();
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn log_records_every_step() {
    let data = samples(Split::Train, 20);
    let out = finetune(&Sequential, student(), &data, &data[..4], &cfg(2)).unwrap();
    let steps: Vec<usize> = out.log.steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    assert!(out.log.steps.iter().all(|s| s.loss.is_finite() && s.lr >= 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lr_schedule_is_continuous(total in 2usize..2000, ratio in 0.0f64..0.5, peak in 1e-5f64..1e-1) {
        let c = TrainConfig { learning_rate: Some(peak), warmup_ratio: ratio, ..TrainConfig::finetune() };
        let warm = warmup_steps(total, ratio);
        let mut prev = lr_schedule(0, total, &c).unwrap();
        for step in 1..=total {
            let lr = lr_schedule(step, total, &c).unwrap();
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            let bound = peak * (1.0 / warm.max(1) as f64 + std::f64::consts::PI / (total - warm).max(1) as f64) + 1e-15;
            prop_assert!((lr - prev).abs() <= bound, "step {step}: {prev} -> {lr}");
            if step > warm {
                prop_assert!(lr <= prev + 1e-15);
            }
            prev = lr;
        }
        prop_assert!(lr_schedule(total, total, &c).unwrap().abs() < 1e-12 * peak);
        prop_assert!(lr_schedule(total + 1, total, &c).is_err());
    }
}
