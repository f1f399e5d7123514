use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::TokenMask;
use crate::error::{Error, Result};
use crate::math;

/// Per-row similarity guard inside cosine square roots.
pub const COSINE_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMetric {
    #[default]
    Cosine,
    Mse,
}

/// Two-layer GELU MLP from student to teacher hidden width. Training-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProjector {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Graph handles of a bound [`FeatureProjector`].
#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeatureProjector {
    pub fn new(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: Tensor::randn(&[student_dim, teacher_dim], 1.0 / math::sqrt(student_dim as f64), &mut rng),
            b1: Tensor::zeros(&[teacher_dim]),
            w2: Tensor::randn(&[teacher_dim, teacher_dim], 1.0 / math::sqrt(teacher_dim as f64), &mut rng),
            b2: Tensor::zeros(&[teacher_dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> ProjectorVars {
        ProjectorVars {
            w1: g.param(&self.w1, trainable),
            b1: g.param(&self.b1, trainable),
            w2: g.param(&self.w2, trainable),
            b2: g.param(&self.b2, trainable),
        }
    }
}

impl ProjectorVars {
    pub fn apply(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let x = g.matmul(h, self.w1)?;
        let x = g.add_row(x, self.b1)?;
        let x = g.gelu(x);
        let x = g.matmul(x, self.w2)?;
        g.add_row(x, self.b2)
    }
}

/// Row-wise cosine between two `n x d` matrices, `n x 1`.
pub fn row_cosine(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let dot = g.sum_last(ab);
    let aa = g.square(a);
    let na = g.sum_last(aa);
    let bb = g.square(b);
    let nb = g.sum_last(bb);
    let nn = g.mul(na, nb)?;
    let nn = g.add_scalar(nn, COSINE_EPS);
    let den = g.sqrt(nn);
    let inv = g.recip(den);
    g.mul(dot, inv)
}

/// Alignment loss between already selected rows of one student and one
/// teacher hidden state. `projector: None` means identity.
pub fn feature_rows(
    g: &mut Graph<'_>,
    student: Var,
    teacher: &Tensor,
    projector: Option<&ProjectorVars>,
    metric: FeatureMetric,
) -> Result<Var> {
    let hs = match projector {
        Some(p) => p.apply(g, student)?,
        None => student,
    };
    if g.shape(hs) != teacher.shape() {
        return Err(Error::dim("feature_align_loss", g.shape(hs), teacher.shape()));
    }
    let ht = g.constant(teacher.clone());
    match metric {
        FeatureMetric::Cosine => {
            let cos = row_cosine(g, hs, ht)?;
            let m = g.mean(cos);
            let neg = g.scale(m, -1.0);
            Ok(g.add_scalar(neg, 1.0))
        }
        FeatureMetric::Mse => {
            let d = g.sub(hs, ht)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
    }
}

/// `(student_layer, teacher_layer)` pairs for offsets counted from the last
/// layer (`0` is the last).
pub fn layer_pairs(offsets: &[usize], student_layers: usize, teacher_layers: usize) -> Result<Vec<(usize, usize)>> {
    offsets
        .iter()
        .map(|&o| {
            if o >= student_layers || o >= teacher_layers {
                Err(Error::Config(format!(
                    "feature layer offset {o} out of range for {student_layers}/{teacher_layers} layers"
                )))
            } else {
                Ok((student_layers - 1 - o, teacher_layers - 1 - o))
            }
        })
        .collect()
}

/// Mean over aligned layer pairs of the per-position feature loss at the
/// positions selected by `mask`.
pub fn feature_align_loss(
    g: &mut Graph<'_>,
    student_hidden: &[Var],
    teacher_hidden: &[Tensor],
    projectors: &[Option<ProjectorVars>],
    metric: FeatureMetric,
    mask: &TokenMask,
    layer_offsets: &[usize],
) -> Result<Var> {
    let pairs = layer_pairs(layer_offsets, student_hidden.len(), teacher_hidden.len())?;
    if pairs.is_empty() {
        return Err(Error::Config("no feature layers selected".into()));
    }
    if projectors.len() != pairs.len() {
        return Err(Error::Contract(format!(
            "{} projectors for {} aligned layers",
            projectors.len(),
            pairs.len()
        )));
    }
    let pos = mask.positions();
    if pos.is_empty() {
        return Err(Error::Contract("feature mask selects no position".into()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for ((s, t), p) in pairs.into_iter().zip(projectors) {
        let hs = g.select_rows(student_hidden[s], &pos)?;
        let ht = teacher_hidden[t].select_rows(&pos);
        terms.push(feature_rows(g, hs, &ht, p.as_ref(), metric)?);
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / n))
}
