use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Guard added to squared norms before normalizing.
pub const NORM_EPS: f64 = 1e-12;

/// Sub-block of the attention map that is aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionGroup {
    /// Every visible entry, averaged per row then over rows.
    #[default]
    All,
    /// Answer-token query rows against image-token key columns.
    ImageToAnswer,
}

/// Where the image tokens and the answer tokens sit in the sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub image: (usize, usize),
    pub answer: Vec<usize>,
}

/// Mean of per-head attention maps.
pub fn head_mean(g: &mut Graph<'_>, heads: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = heads.split_first() else {
        return Err(Error::Contract("no attention heads".into()));
    };
    let mut acc = first;
    for &h in rest {
        acc = g.add(acc, h)?;
    }
    Ok(g.scale(acc, 1.0 / heads.len() as f64))
}

/// Gradient-free head average.
pub fn head_mean_values(heads: &[Tensor]) -> Result<Tensor> {
    let Some(first) = heads.first() else {
        return Err(Error::Contract("no attention heads".into()));
    };
    let mut out = first.clone();
    for h in &heads[1..] {
        if h.shape() != out.shape() {
            return Err(Error::dim("head_mean", h.shape(), out.shape()));
        }
        out.data_mut().iter_mut().zip(h.data()).for_each(|(a, b)| *a += b);
    }
    let k = heads.len() as f64;
    out.data_mut().iter_mut().for_each(|a| *a /= k);
    Ok(out)
}

/// Teacher-side target of the attention loss for a group: the full map for
/// `All`, the selected block for `ImageToAnswer`.
pub fn attention_target(map: &Tensor, group: AttentionGroup, layout: &SequenceLayout) -> Result<Tensor> {
    match group {
        AttentionGroup::All => Ok(map.clone()),
        AttentionGroup::ImageToAnswer => {
            check_block(layout, map.rows())?;
            let (s, e) = layout.image;
            let rows = map.select_rows(&layout.answer);
            let c = map.cols();
            let data = rows.data().chunks_exact(c).flat_map(|r| r[s..e].iter().copied()).collect();
            Tensor::new(alloc::vec![layout.answer.len(), e - s], data)
        }
    }
}

fn check_block(layout: &SequenceLayout, seq: usize) -> Result<()> {
    if layout.answer.is_empty() {
        return Err(Error::Contract("image_to_answer needs at least one answer token".into()));
    }
    let (s, e) = layout.image;
    if s >= e || e > seq || layout.answer.iter().any(|&a| a >= seq) {
        return Err(Error::Contract(format!("layout {layout:?} does not fit a sequence of {seq}")));
    }
    Ok(())
}

/// MSE between a student attention map (head-averaged) and a prepared
/// teacher target from [`attention_target`].
pub fn attention_map_loss(
    g: &mut Graph<'_>,
    student_map: Var,
    target: &Tensor,
    group: AttentionGroup,
    layout: &SequenceLayout,
) -> Result<Var> {
    let shape = g.shape(student_map).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("attention map", &shape, &[]));
    }
    let seq = shape[0];
    match group {
        AttentionGroup::All => {
            if target.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "attention maps over {seq} and {} positions",
                    target.rows()
                )));
            }
            let mut w = Tensor::zeros(&shape);
            for i in 0..seq {
                let wi = 1.0 / ((i + 1) * seq) as f64;
                w.data_mut()[i * seq..i * seq + i + 1].iter_mut().for_each(|x| *x = wi);
            }
            let t = g.constant(target.clone());
            let d = g.sub(student_map, t)?;
            let sq = g.square(d);
            let w = g.constant(w);
            let weighted = g.mul(sq, w)?;
            Ok(g.sum(weighted))
        }
        AttentionGroup::ImageToAnswer => {
            check_block(layout, seq)?;
            let (s, e) = layout.image;
            if target.shape() != [layout.answer.len(), e - s] {
                return Err(Error::Contract("attention target does not match the layout".into()));
            }
            let rows = g.select_rows(student_map, &layout.answer)?;
            let block = g.slice_cols(rows, s, e - s)?;
            let t = g.constant(target.clone());
            let d = g.sub(block, t)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
    }
}

/// MSE between head-averaged last-layer attention maps of the two models.
pub fn attention_affinity_loss(
    g: &mut Graph<'_>,
    student_heads: &[Var],
    teacher_heads: &[Tensor],
    group: AttentionGroup,
    layout: &SequenceLayout,
) -> Result<Var> {
    let tmap = head_mean_values(teacher_heads)?;
    let smap = head_mean(g, student_heads)?;
    let seq = g.shape(smap)[0];
    if tmap.rows() != seq {
        return Err(Error::Contract(format!(
            "attention maps over {seq} and {} positions",
            tmap.rows()
        )));
    }
    let target = attention_target(&tmap, group, layout)?;
    attention_map_loss(g, smap, &target, group, layout)
}

fn normalize_rows(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let n = g.sum_last(sq);
    let n = g.add_scalar(n, NORM_EPS);
    let n = g.sqrt(n);
    let inv = g.recip(n);
    g.mul_col(x, inv)
}

/// `S[i, j] = cos(hidden[image_i], hidden[text_j])`.
pub fn similarity_matrix(g: &mut Graph<'_>, hidden: Var, image: (usize, usize), text: &[usize]) -> Result<Var> {
    let (s, e) = image;
    let seq = g.shape(hidden)[0];
    if s >= e || e > seq || text.is_empty() || text.iter().any(|&t| t >= seq) {
        return Err(Error::Contract("similarity needs image and text positions inside the sequence".into()));
    }
    let hv = g.slice_rows(hidden, s, e - s)?;
    let hq = g.select_rows(hidden, text)?;
    let hv = normalize_rows(g, hv)?;
    let hq = normalize_rows(g, hq)?;
    let qt = g.transpose(hq)?;
    g.matmul(hv, qt)
}

/// Gradient-free [`similarity_matrix`].
pub fn similarity_values(hidden: &Tensor, image: (usize, usize), text: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.param(hidden, false);
    let s = similarity_matrix(&mut g, h, image, text)?;
    Ok(g.tensor(s))
}

/// Mean squared difference of two similarity matrices.
pub fn similarity_mse(g: &mut Graph<'_>, student: Var, teacher: &Tensor) -> Result<Var> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::Contract(format!(
            "similarity matrices {:?} and {:?} differ in token counts",
            g.shape(student),
            teacher.shape()
        )));
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// MSE between the image-text cosine-similarity matrices of both models.
pub fn similarity_affinity_loss(
    g: &mut Graph<'_>,
    student_hidden: Var,
    teacher_hidden: &Tensor,
    image: (usize, usize),
    text: &[usize],
) -> Result<Var> {
    if g.shape(student_hidden)[0] != teacher_hidden.rows() {
        return Err(Error::Contract("student and teacher token counts differ".into()));
    }
    let t = similarity_values(teacher_hidden, image, text)?;
    let s = similarity_matrix(g, student_hidden, image, text)?;
    similarity_mse(g, s, &t)
}
