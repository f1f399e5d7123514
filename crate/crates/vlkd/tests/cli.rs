use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DATA: &str = r#"
[data]
pretrain_size = 16
train_size = 24
eval_size = 12

[train]
batch_size = 8
learning_rate = 0.003
heldout_samples = 4
"#;

const STUDENT: &str = r#"
[model]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32
"#;

const TEACHER: &str = r#"
[model]
role = "teacher"
num_layers = 2
hidden_dim = 32
num_heads = 2
ffn_dim = 64
"#;

const KL: &str = r#"
[distill]
logit_loss = "forward_kl"
feature_loss = "cosine"
"#;

fn vlkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlkd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = vlkd(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, class: &str) {
    let o = vlkd(args);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(class), "{args:?}: {err}");
}

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        for (name, text) in [
            ("student.toml", format!("{STUDENT}{DATA}")),
            ("teacher.toml", format!("{TEACHER}{DATA}")),
            ("distill.toml", format!("{STUDENT}{DATA}{KL}")),
        ] {
            fs::write(dir.path().join(name), text).unwrap();
        }
        let e = Self { dir };
        ok(&["gen-data", "--config", &e.s("student.toml"), "--out", &e.s("data")]);
        e
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }
}

fn steps_only(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"checkpoint\""))
        .map(String::from)
        .collect()
}

#[test]
fn full_pipeline() {
    let e = Env::new();
    let data = e.s("data");
    for f in ["pretrain.jsonl", "train.jsonl", "eval.jsonl"] {
        assert!(e.p("data").join(f).exists(), "{f}");
    }
    ok(&["train", "--config", &e.s("teacher.toml"), "--data", &data, "--out", &e.s("teacher")]);
    ok(&["pretrain", "--config", &e.s("student.toml"), "--data", &data, "--out", &e.s("stage1")]);
    let stage1 = e.s("stage1/pretrain.ckpt");
    let teacher = e.s("teacher/train.ckpt");
    let msg = ok(&[
        "distill", "--config", &e.s("distill.toml"), "--data", &data, "--out", &e.s("kd"), "--student", &stage1, "--teacher",
        &teacher,
    ]);
    assert!(msg.contains("3 steps"), "{msg}");
    let log = fs::read_to_string(e.p("kd/distill.runlog.jsonl")).unwrap();
    assert!(log.contains("\"logit\"") && log.contains("\"feature\""), "{log}");

    let table = ok(&[
        "eval", "--data", &data, "--out", &e.s("ev"), "--model", &e.s("kd/distill.ckpt"), "--teacher", &teacher,
    ]);
    assert!(table.starts_with("| config"), "{table}");
    assert_eq!(fs::read_to_string(e.p("ev/eval.md")).unwrap(), table);
    let rec = ok(&["eval", "--data", &data, "--out", &e.s("ev"), "--model", &teacher, "--format", "records"]);
    assert_eq!(rec.lines().count(), 1);
    assert!(rec.contains("\"accuracy\""));

    let ablate = |out: &str, format: &str| {
        ok(&[
            "ablate", "--config", &e.s("student.toml"), "--data", &data, "--out", &e.s(out), "--student", &stage1, "--teacher",
            &teacher, "--preset", "data", "--format", format,
        ])
    };
    let a = ablate("ab1", "table");
    let b = ablate("ab2", "table");
    assert_eq!(a, b);
    assert_eq!(fs::read(e.p("ab1/ablation.md")).unwrap(), fs::read(e.p("ab2/ablation.md")).unwrap());
    let rows: Vec<&str> = a.lines().skip(2).take_while(|l| l.starts_with('|')).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(names, ["baseline", "forward_kl", "teacher_data", "student_data"]);
    let r = ablate("ab3", "records");
    assert_eq!(r.lines().count(), 5);
}

#[test]
fn resumed_training_is_bit_exact() {
    let e = Env::new();
    let data = e.s("data");
    let teacher_cfg = e.s("teacher.toml");
    ok(&["train", "--config", &teacher_cfg, "--data", &data, "--out", &e.s("t")]);
    let teacher = e.s("t/train.ckpt");
    let distill_cfg = e.s("distill.toml");
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "distill", "--config", &distill_cfg, "--data", &data, "--student", &teacher, "--teacher", &teacher, "--seed", "4",
        ];
        let o = e.s(out);
        args.extend(["--out", &o]);
        args.extend(extra);
        ok(&args)
    };
    run("full", &["--save-every", "2"]);
    assert!(e.p("full/distill.state.ckpt").exists());
    run("resumed", &["--resume", &e.s("full/distill.state.ckpt")]);
    assert_eq!(
        fs::read(e.p("full/distill.ckpt")).unwrap(),
        fs::read(e.p("resumed/distill.ckpt")).unwrap()
    );
    assert_eq!(
        steps_only(&e.p("full/distill.runlog.jsonl")),
        steps_only(&e.p("resumed/distill.runlog.jsonl"))
    );
}

#[test]
fn errors_exit_with_their_class() {
    let e = Env::new();
    let data = e.s("data");
    fs::write(e.p("bad.toml"), "[train]\nlearning_rat = 1.0\n").unwrap();
    fails(&["gen-data", "--config", &e.s("bad.toml"), "--out", &e.s("x")], 5, "ConfigError");
    fails(&["train", "--config", &e.s("distill.toml"), "--data", &data, "--out", &e.s("x")], 5, "ConfigError");
    fails(&["eval", "--data", &data, "--model", &e.s("missing.ckpt"), "--out", &e.s("x")], 3, "IoError");
    fs::write(e.p("junk.ckpt"), b"not a checkpoint").unwrap();
    fails(&["eval", "--data", &data, "--model", &e.s("junk.ckpt"), "--out", &e.s("x")], 4, "FormatError");
    fs::write(e.p("data/eval.jsonl"), "{\"schema_version\": 99}\n").unwrap();
    ok(&["pretrain", "--config", &e.s("student.toml"), "--data", &data, "--out", &e.s("s")]);
    fails(&["eval", "--data", &data, "--model", &e.s("s/pretrain.ckpt"), "--out", &e.s("x")], 4, "FormatError");
    let o = vlkd(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn teacher_vocabulary_must_match() {
    let e = Env::new();
    let data = e.s("data");
    fs::write(e.p("big.toml"), format!("{TEACHER}vocab_size = 600\n{DATA}")).unwrap();
    ok(&["pretrain", "--config", &e.s("big.toml"), "--data", &data, "--out", &e.s("t")]);
    ok(&["pretrain", "--config", &e.s("student.toml"), "--data", &data, "--out", &e.s("s")]);
    fails(
        &["eval", "--data", &data, "--model", &e.s("s/pretrain.ckpt"), "--teacher", &e.s("t/pretrain.ckpt"), "--out", &e.s("x")],
        5,
        "ConfigError",
    );
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.lines().count() > 40, "{out}");
}
