use vlkd_core::data::{generate_split, DataConfig, Split, Vocabulary};
use vlkd_core::eval::*;
use vlkd_core::exec::Sequential;
use vlkd_core::model::{ModelSpec, Role, TransformerLM, VisualEncoder};
use vlkd_core::train::{finetune, prepare, PreparedSample, TrainConfig};
use vlkd_core::Error;

fn model(s: ModelSpec, seed: u64) -> TransformerLM {
    let enc = VisualEncoder::new(s.visual, 7).unwrap();
    TransformerLM::new(s, enc, seed).unwrap()
}

fn small(role: Role, layers: usize, seed: u64) -> TransformerLM {
    model(
        ModelSpec {
            num_layers: layers,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            role,
            ..ModelSpec::teacher()
        },
        seed,
    )
}

fn samples(n: usize) -> Vec<PreparedSample> {
    let vocab = Vocabulary::new(512).unwrap();
    let convs = generate_split(&DataConfig::default(), Split::Eval, n).unwrap();
    prepare(&Sequential, &vocab, &convs, &ModelSpec::teacher().visual).unwrap()
}

/// A model that has seen a few hundred steps, so its answers vary.
fn trained(data: &[PreparedSample]) -> TransformerLM {
    let c = TrainConfig {
        batch_size: Some(8),
        learning_rate: Some(1e-2),
        epochs: 3,
        ..TrainConfig::finetune()
    };
    finetune(&Sequential, small(Role::Teacher, 2, 3), data, &[], &c).unwrap().model
}

#[test]
fn random_models_rarely_answer_correctly() {
    let vocab = Vocabulary::new(512).unwrap();
    let data = samples(100);
    for seed in 0..3 {
        let r = eval_qa_accuracy(&Sequential, &small(Role::Student, 2, seed), &vocab, &data).unwrap();
        assert!(r.accuracy < 5.0, "seed {seed}: {}", r.accuracy);
        assert_eq!(r.samples, 100);
        assert_eq!(r.per_family.iter().map(|f| f.total).sum::<usize>(), 100);
    }
}

#[test]
fn a_copy_agrees_with_itself() {
    let vocab = Vocabulary::new(512).unwrap();
    let data = samples(40);
    let m = trained(&data);
    let copy = m.clone();
    let a = eval_qa_accuracy(&Sequential, &m, &vocab, &data).unwrap();
    let b = eval_qa_accuracy(&Sequential, &copy, &vocab, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(teacher_agreement(&Sequential, &copy, &m, &data).unwrap(), 100.0);
}

#[test]
fn agreement_is_symmetric() {
    let data = samples(40);
    let a = trained(&data);
    let b = small(Role::Student, 2, 5);
    let ga = predict(&Sequential, &a, &data).unwrap();
    let gb = predict(&Sequential, &b, &data).unwrap();
    assert_eq!(agreement_rate(&ga, &gb).unwrap(), agreement_rate(&gb, &ga).unwrap());
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let vocab = Vocabulary::new(512).unwrap();
    let m = small(Role::Student, 2, 0);
    let e = eval_qa_accuracy(&Sequential, &m, &vocab, &[]).unwrap_err();
    assert!(matches!(e, Error::Contract(_)), "{e}");
    assert!(matches!(agreement_rate(&[], &[]), Err(Error::Contract(_))));
}

#[test]
fn accuracy_ignores_sample_order() {
    let vocab = Vocabulary::new(512).unwrap();
    let data = samples(40);
    let m = trained(&data);
    let mut rev = data.clone();
    rev.reverse();
    let a = eval_qa_accuracy(&Sequential, &m, &vocab, &data).unwrap();
    let b = eval_qa_accuracy(&Sequential, &m, &vocab, &rev).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.per_family, b.per_family);
    assert!((a.heldout_loss - b.heldout_loss).abs() < 1e-12);
}

#[test]
fn keeping_every_layer_reproduces_the_teacher() {
    let data = samples(20);
    let t = trained(&data);
    let s = t.init_student_from_teacher(1).unwrap();
    assert_eq!(s.spec.role, Role::Student);
    assert_eq!(s.params, t.params);
    assert_eq!(predict(&Sequential, &s, &data).unwrap(), predict(&Sequential, &t, &data).unwrap());
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let data = samples(4);
    let t = model(
        ModelSpec {
            vocab_size: 600,
            ..small(Role::Teacher, 2, 0).spec
        },
        0,
    );
    let e = teacher_agreement(&Sequential, &small(Role::Student, 2, 0), &t, &data).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}
