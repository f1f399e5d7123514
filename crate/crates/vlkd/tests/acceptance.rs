//! One PASS/FAIL line per acceptance criterion. Runs the full desk-scale
//! experiment (teacher, stage 1, findings matrix), so expect about half an
//! hour on one core.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vlkd::report::parse_ablation_records;
use vlkd_core::ablation::AblationReport;
use vlkd_core::autodiff::{Graph, Tensor, Var};
use vlkd_core::data::{generate_split, tokenize, DataConfig, MaskPolicy, Split, Vocabulary};
use vlkd_core::exec::Sequential;
use vlkd_core::losses::{
    autoregressive_ce, ce_rows, generalized_jsd, jsd_rows, kl_logit_loss, kl_rows, logit_standardize, AffinityLoss,
    DistillConfig, FeatureLoss, KlDirection, LogitLoss, LogitOptions,
};
use vlkd_core::model::{ModelSpec, Role, TransformerLM, VisualEncoder};
use vlkd_core::train::{distill_stage2, finetune, prepare, ModelFingerprint, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn value(f: impl FnOnce(&mut Graph<'_>) -> vlkd_core::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.item(v)
}

fn vlkd(args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_vlkd")).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn gradient_suite() -> Outcome {
    let s = vlkd::gradcheck::run_suite().unwrap();
    let names: Vec<&str> = s.results.iter().map(|r| r.name.as_str()).collect();
    let required = [
        "forward kl",
        "reverse kl",
        "jsd (beta=0.1)",
        "jsd (beta=0.5)",
        "jsd (beta=0.9)",
        "logit mse",
        "feature cosine",
        "feature mse",
        "attention affinity (all)",
        "similarity affinity",
        "autoregressive ce",
    ];
    let missing: Vec<&str> = required.iter().filter(|r| !names.contains(r)).copied().collect();
    let w = s.worst().unwrap();
    let secs = s.elapsed.as_secs_f64();
    outcome(
        s.passed() && missing.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e}, {secs:.1}s, missing {missing:?}",
            s.results.len(),
            w.name,
            w.max_rel_error
        ),
    )
}

fn random_logits(rng: &mut ChaCha8Rng) -> Tensor {
    let rows = rng.random_range(1..4);
    let cols = rng.random_range(2..12);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap()
}

fn kl(t: &Tensor, s: &Tensor, dir: KlDirection, o: &LogitOptions) -> f64 {
    value(|g| {
        let v = g.leaf(s.clone(), false);
        kl_rows(g, t, v, dir, o)
    })
}

fn jsd(t: &Tensor, s: &Tensor, beta: f64, o: &LogitOptions) -> f64 {
    value(|g| {
        let v = g.leaf(s.clone(), false);
        jsd_rows(g, t, v, beta, o)
    })
}

fn divergence_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_self = 0.0f64;
    let mut min_div = f64::INFINITY;
    let mut worst_sym = 0.0f64;
    let mut worst_limit = 0.0f64;
    for _ in 0..100 {
        let t = random_logits(&mut rng);
        let s = Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let o = LogitOptions::at(rng.random_range(0.3..3.0));
        let beta = rng.random_range(0.01..0.99);
        worst_self = worst_self
            .max(kl(&t, &t, KlDirection::Forward, &o).abs())
            .max(kl(&t, &t, KlDirection::Reverse, &o).abs())
            .max(jsd(&t, &t, beta, &o).abs());
        min_div = min_div
            .min(kl(&t, &s, KlDirection::Forward, &o))
            .min(kl(&t, &s, KlDirection::Reverse, &o))
            .min(jsd(&t, &s, beta, &o));
        worst_sym = worst_sym.max((jsd(&t, &s, 0.5, &o) - jsd(&s, &t, 0.5, &o)).abs());

        let shrink = |x: &Tensor| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 1.5 / 4.0).collect()).unwrap();
        let (tm, sm) = (shrink(&t), shrink(&s));
        let lo = LogitOptions {
            scale_t2: false,
            ..LogitOptions::at(rng.random_range(0.7..3.0))
        };
        let b = 1e-3;
        let fwd = kl(&tm, &sm, KlDirection::Forward, &lo);
        let rev = kl(&tm, &sm, KlDirection::Reverse, &lo);
        if fwd > 1e-9 && rev > 1e-9 {
            worst_limit = worst_limit
                .max((jsd(&tm, &sm, b, &lo) / b / fwd - 1.0).abs())
                .max((jsd(&tm, &sm, 1.0 - b, &lo) / b / rev - 1.0).abs());
        }
    }
    outcome(
        worst_self <= 1e-10 && min_div >= -1e-15 && worst_sym <= 1e-10 && worst_limit < 0.01,
        format!(
            "self {worst_self:.1e}, min {min_div:.1e}, jsd(0.5) asymmetry {worst_sym:.1e}, limit-law error {:.3}%",
            100.0 * worst_limit
        ),
    )
}

fn standardization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let soft = |z: &Tensor, t: f64| {
        let mut g = Graph::new();
        let v = g.leaf(z.clone(), false);
        let s = logit_standardize(&mut g, v).unwrap();
        let p = g.softmax_t(s, t).unwrap();
        g.value(p).to_vec()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z = random_logits(&mut rng);
        let a = rng.random_range(0.05..20.0);
        let b = rng.random_range(-50.0..50.0);
        let t = rng.random_range(0.3..3.0);
        let moved = Tensor::new(z.shape().to_vec(), z.data().iter().map(|x| a * x + b).collect()).unwrap();
        for (x, y) in soft(&z, t).iter().zip(soft(&moved, t)) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.1e} over 100 draws"))
}

fn tiny(role: Role, layers: usize, hidden: usize, seed: u64) -> TransformerLM {
    let spec = ModelSpec {
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: 2,
        ffn_dim: 2 * hidden,
        role,
        ..ModelSpec::teacher()
    };
    TransformerLM::new(spec, VisualEncoder::new(spec.visual, 7).unwrap(), seed).unwrap()
}

fn freeze_and_baseline() -> Outcome {
    let vocab = Vocabulary::new(512).unwrap();
    let convs = generate_split(&DataConfig::default(), Split::Train, 32).unwrap();
    let data = prepare(&Sequential, &vocab, &convs, &ModelSpec::teacher().visual).unwrap();
    let teacher = tiny(Role::Teacher, 3, 32, 2);
    let student = tiny(Role::Student, 2, 16, 1);
    let cfg = TrainConfig {
        batch_size: Some(8),
        learning_rate: Some(3e-3),
        ..TrainConfig::finetune()
    };
    let all = DistillConfig {
        logit_loss: LogitLoss::ForwardKl,
        feature_loss: FeatureLoss::Cosine,
        affinity_loss: AffinityLoss::Attention,
        ..DistillConfig::default()
    };
    let tb = ModelFingerprint::of(&teacher);
    let sb = ModelFingerprint::of(&student);
    let out = distill_stage2(&Sequential, student.clone(), &teacher, &data, &[], &cfg, &all).unwrap();
    let frozen = ModelFingerprint::of(&teacher) == tb && ModelFingerprint::of(&out.model).encoder == sb.encoder;
    let zero = DistillConfig {
        logit_weight: 0.0,
        feature_weight: 0.0,
        affinity_weight: 0.0,
        ..all
    };
    let z = distill_stage2(&Sequential, student.clone(), &teacher, &data, &[], &cfg, &zero).unwrap();
    let base = finetune(&Sequential, student, &data, &[], &cfg).unwrap();
    let identical = z.model == base.model && z.log.losses() == base.log.losses();
    outcome(
        frozen && identical,
        format!("teacher and encoder hashes unchanged: {frozen}, zero-weight run bit-identical: {identical}"),
    )
}

fn masking() -> Outcome {
    let vocab = Vocabulary::new(512).unwrap();
    let convs = generate_split(&DataConfig::default(), Split::Train, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = LogitOptions::at(0.7);
    let mut bad = 0;
    for conv in &convs {
        let s = tokenize(&vocab, conv, 9).unwrap();
        let n = s.ids.len();
        let mask = s.mask(MaskPolicy::AnswerOnly);
        let count_ok = mask.count() == s.answer_ids().len() + 1;
        let student = Tensor::randn(&[n, vocab.len()], 2.0, &mut rng);
        let teacher = Tensor::randn(&[n, vocab.len()], 2.0, &mut rng);
        let rows: Vec<usize> = (s.prompt_len - 1..n - 1).collect();
        let ss = student.select_rows(&rows);
        let ts = teacher.select_rows(&rows);
        let targets = s.ids[s.prompt_len..].to_vec();
        let bits = |f: &dyn Fn(&mut Graph<'_>, Var) -> vlkd_core::Result<Var>, x: &Tensor| {
            value(|g| {
                let v = g.leaf(x.clone(), false);
                f(g, v)
            })
            .to_bits()
        };
        let same = bits(&|g, v| autoregressive_ce(g, v, &s.ids, mask), &student) == bits(&|g, v| ce_rows(g, v, &targets), &ss)
            && bits(&|g, v| kl_logit_loss(g, &teacher, v, KlDirection::Forward, mask, &opts), &student)
                == bits(&|g, v| kl_rows(g, &ts, v, KlDirection::Forward, &opts), &ss)
            && bits(&|g, v| generalized_jsd(g, &teacher, v, 0.5, mask, &opts), &student)
                == bits(&|g, v| jsd_rows(g, &ts, v, 0.5, &opts), &ss);
        if !(count_ok && same) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} of 1000 samples differ from explicit slicing"))
}

const TINY: &str = r#"
[model]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32

[data]
pretrain_size = 16
train_size = 24
eval_size = 12

[train]
batch_size = 8
learning_rate = 0.003
heldout_samples = 4
"#;

fn determinism(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    fs::write(dir.join("kd.toml"), format!("{TINY}\n[distill]\nlogit_loss = \"forward_kl\"\n")).unwrap();
    let p = |rel: &str| dir.join(rel).display().to_string();
    let c = p("tiny.toml");
    let kd = p("kd.toml");
    vlkd(&["gen-data", "--config", &c, "--out", &p("data")]);
    vlkd(&["pretrain", "--config", &c, "--data", &p("data"), "--out", &p("s1")]);
    let s1 = p("s1/pretrain.ckpt");
    let ablate = |out: &str| {
        vlkd(&[
            "ablate", "--config", &c, "--data", &p("data"), "--out", &p(out), "--student", &s1, "--teacher", &s1, "--preset", "logits",
            "--format", "records",
        ]);
        fs::read(dir.join(out).join("ablation.jsonl")).unwrap()
    };
    let reports = ablate("a") == ablate("b");
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["distill", "--config", &kd, "--student", &s1, "--teacher", &s1];
        let (d, o) = (p("data"), p(out));
        args.extend(["--data", &d, "--out", &o]);
        args.extend(extra);
        vlkd(&args);
        fs::read(dir.join(out).join("distill.ckpt")).unwrap()
    };
    let full = run("full", &["--save-every", "2"]);
    let resumed = run("resumed", &["--resume", &p("full/distill.state.ckpt")]);
    let exact = full == resumed;
    outcome(
        reports && exact,
        format!("repeated ablate byte-identical: {reports}, resumed checkpoint bit-exact: {exact}"),
    )
}

struct Desk {
    report: AblationReport,
    teacher_accuracy: f64,
    secs: f64,
}

fn desk(dir: &Path) -> Desk {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let teacher_cfg = root.join("teacher.toml").display().to_string();
    let student_cfg = root.join("student.toml").display().to_string();
    let p = |rel: &str| dir.join(rel).display().to_string();
    let start = Instant::now();
    vlkd(&["gen-data", "--out", &p("data")]);
    vlkd(&["train", "--config", &teacher_cfg, "--data", &p("data"), "--out", &p("teacher")]);
    vlkd(&["pretrain", "--config", &student_cfg, "--data", &p("data"), "--out", &p("stage1")]);
    vlkd(&[
        "ablate", "--config", &student_cfg, "--data", &p("data"), "--out", &p("ab"), "--student", &p("stage1/pretrain.ckpt"),
        "--teacher", &p("teacher/train.ckpt"), "--preset", "findings", "--format", "records",
    ]);
    let secs = start.elapsed().as_secs_f64();
    let path = dir.join("ab/ablation.jsonl");
    let report = parse_ablation_records(&fs::read_to_string(&path).unwrap(), &path).unwrap();
    let table = vlkd::report::ablation_table(&report);
    println!("{table}");
    Desk {
        teacher_accuracy: report.teacher_accuracy,
        report,
        secs,
    }
}

fn finding_2(d: &Desk) -> Outcome {
    let b = d.report.baseline().unwrap();
    let k = d.report.row("forward_kl").unwrap();
    let pass = d.teacher_accuracy >= 90.0
        && k.accuracy.mean > b.accuracy.mean
        && k.agreement.mean > b.agreement.mean
        && d.secs < 1800.0;
    outcome(
        pass,
        format!(
            "teacher {:.2}%, accuracy {:.2} -> {:.2}, agreement {:.2} -> {:.2}, total {:.0}s",
            d.teacher_accuracy, b.accuracy.mean, k.accuracy.mean, b.agreement.mean, k.agreement.mean, d.secs
        ),
    )
}

fn finding_1(d: &Desk) -> Outcome {
    let b = d.report.baseline().unwrap();
    let one = d.report.row("last_layer").unwrap();
    let two = d.report.row("last_two_layers");
    let measured = two.is_some_and(|r| r.runs.len() == 3);
    let direction = two.map_or("missing".to_string(), |r| {
        format!("last two layers {:.2} ({:+.2} vs baseline)", r.accuracy.mean, r.accuracy.mean - b.accuracy.mean)
    });
    outcome(
        one.accuracy.mean >= b.accuracy.mean - b.accuracy.std && measured,
        format!(
            "last layer {:.2} vs baseline {:.2} ± {:.2}; {direction}",
            one.accuracy.mean, b.accuracy.mean, b.accuracy.std
        ),
    )
}

fn finding_4(d: &Desk) -> Outcome {
    let k = d.report.row("forward_kl").unwrap();
    let t = d.report.row("teacher_data").unwrap();
    outcome(
        t.agreement.mean >= k.agreement.mean,
        format!("agreement {:.2} (original) vs {:.2} (teacher data)", k.agreement.mean, t.agreement.mean),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = TempDir::new().unwrap();
    let mut lines = vec![
        ("gradient suite", gradient_suite()),
        ("divergence identities", divergence_identities()),
        ("standardization invariance", standardization()),
        ("freeze and baseline contracts", freeze_and_baseline()),
    ];
    let d = desk(tmp.path());
    lines.push(("forward KL beats CE-only baseline", finding_2(&d)));
    lines.push(("last-layer feature alignment", finding_1(&d)));
    lines.push(("teacher-regenerated data agreement", finding_4(&d)));
    lines.push(("answer-only masking counts", masking()));
    lines.push(("determinism and persistence", determinism(&tmp.path().join("det"))));
    let mut ok = true;
    for (name, o) in &lines {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        ok &= o.pass;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
