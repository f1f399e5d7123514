//! Finite-difference check of every differentiable operation and loss.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlkd_core::autodiff::{finite_diff_gradcheck, Graph, Tensor, Var};
use vlkd_core::data::{TokenMask, IMG};
use vlkd_core::losses::{
    attention_affinity_loss, autoregressive_ce, feature_align_loss, generalized_jsd, kl_logit_loss, mse_logit_loss,
    similarity_affinity_loss, AttentionGroup, FeatureMetric, FeatureProjector, KlDirection, LogitOptions,
    ProjectorVars, SequenceLayout,
};
use vlkd_core::model::{ModelSpec, TransformerLM, VisualEncoder, VisualEncoderSpec};

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub results: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn table(&self) -> String {
        let w = self.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!("{:<w$}  {:>12}  result\n", "check", "max rel err");
        for r in &self.results {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<w$}  {:>12.3e}  {verdict}\n", r.name, r.max_rel_error));
        }
        s.push_str(&format!(
            "{} checks, tolerance {TOLERANCE:e}, {:.2}s\n",
            self.results.len(),
            self.elapsed.as_secs_f64()
        ));
        s
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, 0.5, seed);
    t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
    t
}

fn rows_mask(len: usize, on: &[usize]) -> TokenMask {
    let mut m = vec![false; len];
    for &i in on {
        m[i] = true;
    }
    TokenMask(m)
}

/// Scalarizes `y` against fixed random weights so every output element
/// contributes to the checked gradient.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var, vlkd_core::Error> {
    let w = randn(g.shape(y), 1.0, seed);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Objective = Box<dyn Fn(&mut Graph<'_>, Var) -> Result<Var, vlkd_core::Error>>;

struct Case {
    name: String,
    x: Tensor,
    f: Objective,
}

fn case(name: &str, x: Tensor, f: impl Fn(&mut Graph<'_>, Var) -> Result<Var, vlkd_core::Error> + 'static) -> Case {
    Case {
        name: name.to_string(),
        x,
        f: Box::new(f),
    }
}

/// Elementwise or shape-preserving op applied to `x`, then projected.
fn unary(name: &str, x: Tensor, op: impl Fn(&mut Graph<'_>, Var) -> Result<Var, vlkd_core::Error> + 'static) -> Case {
    case(name, x, move |g, v| {
        let y = op(g, v)?;
        project(g, y, 99)
    })
}

fn op_cases() -> Vec<Case> {
    let a = randn(&[3, 4], 1.0, 1);
    let b = randn(&[4, 5], 1.0, 2);
    let c = randn(&[3, 4], 1.0, 3);
    let row = randn(&[4], 1.0, 4);
    let col = randn(&[3, 1], 1.0, 5);
    let sq = randn(&[5, 5], 1.0, 6);
    let mut v = Vec::new();

    let bb = b.clone();
    v.push(unary("matmul (left)", a.clone(), move |g, x| {
        let r = g.constant(bb.clone());
        g.matmul(x, r)
    }));
    let aa = a.clone();
    v.push(unary("matmul (right)", b.clone(), move |g, x| {
        let l = g.constant(aa.clone());
        g.matmul(l, x)
    }));
    v.push(unary("transpose", a.clone(), |g, x| g.transpose(x)));
    for (name, which) in [("add", 0), ("sub (left)", 1), ("sub (right)", 2), ("mul", 3)] {
        let cc = c.clone();
        v.push(unary(name, a.clone(), move |g, x| {
            let k = g.constant(cc.clone());
            match which {
                0 => g.add(x, k),
                1 => g.sub(x, k),
                2 => g.sub(k, x),
                _ => g.mul(x, k),
            }
        }));
    }
    v.push(unary("mul (same operand)", a.clone(), |g, x| g.mul(x, x)));
    let rr = row.clone();
    v.push(unary("add_row (matrix)", a.clone(), move |g, x| {
        let r = g.constant(rr.clone());
        g.add_row(x, r)
    }));
    let aa = a.clone();
    v.push(unary("add_row (bias)", row.clone(), move |g, x| {
        let m = g.constant(aa.clone());
        g.add_row(m, x)
    }));
    let cc = col.clone();
    v.push(unary("mul_col (matrix)", a.clone(), move |g, x| {
        let k = g.constant(cc.clone());
        g.mul_col(x, k)
    }));
    let aa = a.clone();
    v.push(unary("mul_col (column)", col.clone(), move |g, x| {
        let m = g.constant(aa.clone());
        g.mul_col(m, x)
    }));
    v.push(unary("scale", a.clone(), |g, x| Ok(g.scale(x, -1.7))));
    v.push(unary("add_scalar", a.clone(), |g, x| Ok(g.add_scalar(x, 0.3))));
    v.push(unary("exp", a.clone(), |g, x| Ok(g.exp(x))));
    v.push(unary("ln", positive(&[3, 4], 7), |g, x| Ok(g.ln(x))));
    v.push(unary("sqrt", positive(&[3, 4], 8), |g, x| Ok(g.sqrt(x))));
    v.push(unary("square", a.clone(), |g, x| Ok(g.square(x))));
    v.push(unary("recip", positive(&[3, 4], 9), |g, x| Ok(g.recip(x))));
    v.push(unary("gelu", randn(&[3, 4], 2.0, 10), |g, x| Ok(g.gelu(x))));
    v.push(case("sum", a.clone(), |g, x| {
        let s = g.sum(x);
        Ok(g.square(s))
    }));
    v.push(case("mean", a.clone(), |g, x| {
        let s = g.mean(x);
        Ok(g.square(s))
    }));
    v.push(unary("sum_last", a.clone(), |g, x| Ok(g.sum_last(x))));
    v.push(unary("softmax_t (T=1)", a.clone(), |g, x| g.softmax_t(x, 1.0)));
    v.push(unary("softmax_t (T=0.7)", a.clone(), |g, x| g.softmax_t(x, 0.7)));
    v.push(unary("log_softmax_t (T=2)", a.clone(), |g, x| g.log_softmax_t(x, 2.0)));
    v.push(unary("causal_softmax", sq.clone(), |g, x| g.causal_softmax(x, 0.5)));
    let (gain, bias) = (randn(&[4], 1.0, 11), randn(&[4], 1.0, 12));
    for which in 0..3 {
        let (a2, g2, b2) = (a.clone(), gain.clone(), bias.clone());
        let x = [a.clone(), gain.clone(), bias.clone()][which].clone();
        let name = ["layer_norm (input)", "layer_norm (gain)", "layer_norm (bias)"][which];
        v.push(unary(name, x, move |g, x| {
            let mut t = [None, None, None];
            t[which] = Some(x);
            let xi = t[0].unwrap_or_else(|| g.constant(a2.clone()));
            let gi = t[1].unwrap_or_else(|| g.constant(g2.clone()));
            let bi = t[2].unwrap_or_else(|| g.constant(b2.clone()));
            g.layer_norm(xi, gi, bi)
        }));
    }
    v.push(unary("standardize", a.clone(), |g, x| Ok(g.standardize(x))));
    v.push(unary("embedding", randn(&[6, 3], 1.0, 13), |g, x| g.embedding(x, &[4, 0, 4, 2])));
    let cc = c.clone();
    v.push(unary("concat_rows", a.clone(), move |g, x| {
        let k = g.constant(cc.clone());
        g.concat_rows(&[k, x, x])
    }));
    let cc = c.clone();
    v.push(unary("concat_cols", a.clone(), move |g, x| {
        let k = g.constant(cc.clone());
        g.concat_cols(&[x, k, x])
    }));
    v.push(unary("select_rows", a.clone(), |g, x| g.select_rows(x, &[2, 0, 2])));
    v.push(unary("slice_rows", a.clone(), |g, x| g.slice_rows(x, 1, 2)));
    v.push(unary("slice_cols", a.clone(), |g, x| g.slice_cols(x, 1, 2)));
    v
}

fn loss_cases() -> Vec<Case> {
    let seq = 6;
    let c = 7;
    let teacher = randn(&[seq, c], 1.5, 20);
    let student = randn(&[seq, c], 1.5, 21);
    let mask = rows_mask(seq, &[2, 3, 4]);
    let mut v = Vec::new();

    for (name, dir, std) in [
        ("forward kl", KlDirection::Forward, false),
        ("reverse kl", KlDirection::Reverse, false),
        ("forward kl (standardized)", KlDirection::Forward, true),
    ] {
        let (t, m) = (teacher.clone(), mask.clone());
        v.push(case(name, student.clone(), move |g, x| {
            let opts = LogitOptions {
                standardize: std,
                ..LogitOptions::at(0.7)
            };
            kl_logit_loss(g, &t, x, dir, &m, &opts)
        }));
    }
    for beta in [0.1, 0.5, 0.9] {
        let (t, m) = (teacher.clone(), mask.clone());
        v.push(case(&format!("jsd (beta={beta})"), student.clone(), move |g, x| {
            generalized_jsd(g, &t, x, beta, &m, &LogitOptions::at(0.7))
        }));
    }
    let (t, m) = (teacher.clone(), mask.clone());
    v.push(case("logit mse", student.clone(), move |g, x| mse_logit_loss(g, &t, x, &m)));
    let ids = [1usize, 5, 6, 2, 3, 4];
    let m = mask.clone();
    v.push(case("autoregressive ce", student.clone(), move |g, x| autoregressive_ce(g, x, &ids, &m)));

    let (ds, dt) = (3, 5);
    let hs = randn(&[seq, ds], 1.0, 22);
    let ht = randn(&[seq, dt], 1.0, 23);
    let proj = FeatureProjector::new(ds, dt, 24);
    for (name, metric) in [("feature cosine", FeatureMetric::Cosine), ("feature mse", FeatureMetric::Mse)] {
        let (ht, p, m) = (ht.clone(), proj.clone(), mask.clone());
        v.push(case(name, hs.clone(), move |g, x| {
            let pv = ProjectorVars {
                w1: g.constant(p.w1.clone()),
                b1: g.constant(p.b1.clone()),
                w2: g.constant(p.w2.clone()),
                b2: g.constant(p.b2.clone()),
            };
            feature_align_loss(g, &[x], std::slice::from_ref(&ht), &[Some(pv)], metric, &m, &[0])
        }));
    }
    let ht_same = randn(&[seq, ds], 1.0, 25);
    let m = mask.clone();
    v.push(case("feature cosine (identity)", hs.clone(), move |g, x| {
        feature_align_loss(g, &[x], std::slice::from_ref(&ht_same), &[None], FeatureMetric::Cosine, &m, &[0])
    }));

    let layout = SequenceLayout {
        image: (1, 4),
        answer: vec![4, 5],
    };
    let theads = vec![
        causal(&randn(&[seq, seq], 1.0, 26)),
        causal(&randn(&[seq, seq], 1.0, 27)),
    ];
    for (name, group) in [
        ("attention affinity (all)", AttentionGroup::All),
        ("attention affinity (image to answer)", AttentionGroup::ImageToAnswer),
    ] {
        let (th, l) = (theads.clone(), layout.clone());
        v.push(case(name, randn(&[2 * seq, seq], 1.0, 28), move |g, x| {
            let h0 = g.slice_rows(x, 0, seq)?;
            let h0 = g.causal_softmax(h0, 1.0)?;
            let h1 = g.slice_rows(x, seq, seq)?;
            let h1 = g.causal_softmax(h1, 1.0)?;
            attention_affinity_loss(g, &[h0, h1], &th, group, &l)
        }));
    }
    let th = randn(&[seq, dt], 1.0, 29);
    v.push(case("similarity affinity", randn(&[seq, ds], 1.0, 30), move |g, x| {
        similarity_affinity_loss(g, x, &th, (1, 4), &[4, 5])
    }));
    v
}

fn causal(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.param(x, false);
    let s = g.causal_softmax(v, 1.0).expect("square");
    g.tensor(s)
}

/// The whole language model, differentiated with respect to the projected
/// visual prefix.
fn model_case() -> Case {
    let visual = VisualEncoderSpec {
        image_height: 4,
        image_width: 4,
        patch_size: 2,
        channels: 4,
        visual_dim: 3,
    };
    let spec = ModelSpec {
        vocab_size: 24,
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        max_seq_len: 12,
        visual,
        ..ModelSpec::student()
    };
    let model = TransformerLM::new(spec, VisualEncoder::new(visual, 40).expect("valid"), 41).expect("valid");
    let ids = vec![1, IMG, IMG, IMG, IMG, 17, 20, 4, 21, 2];
    let mask = rows_mask(ids.len(), &[7, 8]);
    case("transformer lm + ce", randn(&[4, 8], 1.0, 42), move |g, x| {
        let vars = model.params.map(|_, t| g.constant(t.clone()));
        let out = model.forward(g, &vars, x, &ids)?;
        autoregressive_ce(g, out.logits, &ids, &mask)
    })
}

/// Runs every check and reports the worst relative error of each.
pub fn run_suite() -> Result<Suite> {
    let start = Instant::now();
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.push(model_case());
    let mut results = Vec::with_capacity(cases.len());
    for c in cases {
        let err = finite_diff_gradcheck(&c.f, &c.x, STEP)?;
        results.push(CheckResult {
            name: c.name,
            max_rel_error: err,
        });
    }
    Ok(Suite {
        results,
        elapsed: start.elapsed(),
    })
}
