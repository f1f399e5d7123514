use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::TokenMask;
use crate::error::{Error, Result};

/// Direction of a logit-level KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(P_t || P_s)`.
    Forward,
    /// `KL(P_s || P_t)`.
    Reverse,
}

/// Options shared by the distribution-matching logit losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitOptions {
    pub temperature: f64,
    pub standardize: bool,
    /// Multiply by `T^2`.
    pub scale_t2: bool,
}

impl Default for LogitOptions {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            standardize: false,
            scale_t2: true,
        }
    }
}

impl LogitOptions {
    pub fn at(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    fn factor(&self) -> f64 {
        if self.scale_t2 {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

fn selected_rows(mask: &TokenMask, seq: usize) -> Result<Vec<usize>> {
    if mask.len() != seq {
        return Err(Error::dim("token mask", &[mask.len()], &[seq]));
    }
    let rows = mask.prediction_rows();
    if rows.is_empty() {
        return Err(Error::Contract("mask selects no predicted position".into()));
    }
    Ok(rows)
}

fn check_pair(g: &Graph<'_>, teacher: &Tensor, student: Var) -> Result<()> {
    let (ts, ss) = (teacher.shape(), g.shape(student));
    if ts != ss || ss.len() != 2 {
        return Err(Error::dim("logit loss", ts, ss));
    }
    Ok(())
}

/// Next-token cross entropy averaged over the positions selected by `mask`.
/// Row `p - 1` of `logits` is scored against `ids[p]`.
pub fn autoregressive_ce(g: &mut Graph<'_>, logits: Var, ids: &[usize], mask: &TokenMask) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(Error::dim("autoregressive_ce", &shape, &[ids.len()]));
    }
    let rows = selected_rows(mask, ids.len())?;
    let targets: Vec<usize> = rows.iter().map(|&r| ids[r + 1]).collect();
    let sel = g.select_rows(logits, &rows)?;
    ce_rows(g, sel, &targets)
}

/// Cross entropy of already selected logit rows against `targets`.
pub fn ce_rows(g: &mut Graph<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::dim("cross entropy", &shape, &[targets.len()]));
    }
    let c = shape[1];
    let mut onehot = Tensor::zeros(&shape);
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Contract(format!("target id {t} outside vocabulary of {c}")));
        }
        onehot.data_mut()[r * c + t] = 1.0;
    }
    let lp = g.log_softmax_t(logits, 1.0)?;
    let oh = g.constant(onehot);
    let picked = g.mul(lp, oh)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / targets.len() as f64))
}

/// Per-row `(z - mean) / std` with population std; constant rows give zeros.
pub fn logit_standardize(g: &mut Graph<'_>, z: Var) -> Result<Var> {
    let c = g.shape(z).last().copied().unwrap_or(0);
    if c < 2 {
        return Err(Error::dim("logit_standardize", g.shape(z), &[2]));
    }
    Ok(g.standardize(z))
}

/// Gradient-free counterpart of [`logit_standardize`].
pub fn standardize_values(z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.param(z, false);
    let s = logit_standardize(&mut g, v)?;
    Ok(g.tensor(s))
}

fn prepare(g: &mut Graph<'_>, teacher: &Tensor, student: Var, opts: &LogitOptions) -> Result<(Var, Var)> {
    let t = g.constant(teacher.clone());
    if opts.standardize {
        Ok((logit_standardize(g, t)?, logit_standardize(g, student)?))
    } else {
        Ok((t, student))
    }
}

/// KL over already selected rows, averaged over rows.
pub fn kl_rows(
    g: &mut Graph<'_>,
    teacher: &Tensor,
    student: Var,
    direction: KlDirection,
    opts: &LogitOptions,
) -> Result<Var> {
    check_pair(g, teacher, student)?;
    let n = teacher.rows() as f64;
    let tt = opts.temperature;
    let (t, s) = prepare(g, teacher, student, opts)?;
    let lt = g.log_softmax_t(t, tt)?;
    let ls = g.log_softmax_t(s, tt)?;
    let per = match direction {
        KlDirection::Forward => {
            let pt = g.softmax_t(t, tt)?;
            let d = g.sub(lt, ls)?;
            g.mul(pt, d)?
        }
        KlDirection::Reverse => {
            let ps = g.softmax_t(s, tt)?;
            let d = g.sub(ls, lt)?;
            g.mul(ps, d)?
        }
    };
    let total = g.sum(per);
    Ok(g.scale(total, opts.factor() / n))
}

/// Temperature-softened KL between teacher and student over masked
/// prediction rows, times `T^2` when `opts.scale_t2` is set.
pub fn kl_logit_loss(
    g: &mut Graph<'_>,
    teacher_logits: &Tensor,
    student_logits: Var,
    direction: KlDirection,
    mask: &TokenMask,
    opts: &LogitOptions,
) -> Result<Var> {
    check_pair(g, teacher_logits, student_logits)?;
    let rows = selected_rows(mask, teacher_logits.rows())?;
    let s = g.select_rows(student_logits, &rows)?;
    kl_rows(g, &teacher_logits.select_rows(&rows), s, direction, opts)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Parameter(format!("jsd beta {beta} outside (0, 1)")));
    }
    Ok(())
}

/// Generalized JSD over already selected rows.
pub fn jsd_rows(g: &mut Graph<'_>, teacher: &Tensor, student: Var, beta: f64, opts: &LogitOptions) -> Result<Var> {
    check_beta(beta)?;
    check_pair(g, teacher, student)?;
    let n = teacher.rows() as f64;
    let tt = opts.temperature;
    let (t, s) = prepare(g, teacher, student, opts)?;
    let pt = g.softmax_t(t, tt)?;
    let lt = g.log_softmax_t(t, tt)?;
    let ps = g.softmax_t(s, tt)?;
    let ls = g.log_softmax_t(s, tt)?;
    let a = g.scale(pt, beta);
    let b = g.scale(ps, 1.0 - beta);
    let m = g.add(a, b)?;
    let lm = g.ln(m);
    let d1 = g.sub(lt, lm)?;
    let k1 = g.mul(pt, d1)?;
    let k1 = g.sum(k1);
    let d2 = g.sub(ls, lm)?;
    let k2 = g.mul(ps, d2)?;
    let k2 = g.sum(k2);
    let k1 = g.scale(k1, beta);
    let k2 = g.scale(k2, 1.0 - beta);
    let total = g.add(k1, k2)?;
    Ok(g.scale(total, opts.factor() / n))
}

/// `beta * KL(P_t || M) + (1 - beta) * KL(P_s || M)` with
/// `M = beta * P_t + (1 - beta) * P_s`, averaged over masked rows.
pub fn generalized_jsd(
    g: &mut Graph<'_>,
    teacher_logits: &Tensor,
    student_logits: Var,
    beta: f64,
    mask: &TokenMask,
    opts: &LogitOptions,
) -> Result<Var> {
    check_beta(beta)?;
    check_pair(g, teacher_logits, student_logits)?;
    let rows = selected_rows(mask, teacher_logits.rows())?;
    let s = g.select_rows(student_logits, &rows)?;
    jsd_rows(g, &teacher_logits.select_rows(&rows), s, beta, opts)
}

/// Mean squared logit difference over already selected rows.
pub fn mse_rows(g: &mut Graph<'_>, teacher: &Tensor, student: Var) -> Result<Var> {
    check_pair(g, teacher, student)?;
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub fn mse_logit_loss(g: &mut Graph<'_>, teacher_logits: &Tensor, student_logits: Var, mask: &TokenMask) -> Result<Var> {
    check_pair(g, teacher_logits, student_logits)?;
    let rows = selected_rows(mask, teacher_logits.rows())?;
    let s = g.select_rows(student_logits, &rows)?;
    mse_rows(g, &teacher_logits.select_rows(&rows), s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn value(f: impl FnOnce(&mut Graph<'_>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.item(v)
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let c = 512;
        let ids = vec![1, 5, 7];
        let mask = TokenMask(vec![false, true, true]);
        let l = value(|g| {
            let z = g.constant(Tensor::zeros(&[3, c]));
            autoregressive_ce(g, z, &ids, &mask)
        });
        assert!((l - (c as f64).ln()).abs() < 1e-12);
        assert!((l - 6.2383).abs() < 1e-4);
    }

    #[test]
    fn ce_peaked_is_tiny() {
        let ids = vec![0, 2, 1];
        let mut z = Tensor::full(&[3, 4], -10.0);
        z.data_mut()[2] = 10.0;
        z.data_mut()[4 + 1] = 10.0;
        let l = value(|g| {
            let z = g.constant(z);
            autoregressive_ce(g, z, &ids, &TokenMask::all(3))
        });
        assert!(l < 1e-8);
    }

    #[test]
    fn ce_empty_mask() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let r = autoregressive_ce(&mut g, z, &[0, 1], &TokenMask(vec![true, false]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn forward_kl_known_value() {
        // softmax of [ln 3, 0] is [0.75, 0.25]
        let teacher = t(&[vec![0.0, 0.0]]);
        let student = t(&[vec![3f64.ln(), 0.0]]);
        let opts = LogitOptions {
            temperature: 1.0,
            ..Default::default()
        };
        let l = value(|g| {
            let s = g.constant(student);
            kl_rows(g, &teacher, s, KlDirection::Forward, &opts)
        });
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn t2_scaling_flag() {
        let teacher = t(&[vec![1.0, 0.0, -1.0]]);
        let student = t(&[vec![0.0, 0.5, 0.0]]);
        let on = LogitOptions::at(2.0);
        let off = LogitOptions { scale_t2: false, ..on };
        let a = value(|g| {
            let s = g.constant(student.clone());
            kl_rows(g, &teacher, s, KlDirection::Forward, &on)
        });
        let b = value(|g| {
            let s = g.constant(student.clone());
            kl_rows(g, &teacher, s, KlDirection::Forward, &off)
        });
        assert!((a - 4.0 * b).abs() < 1e-14);
    }

    #[test]
    fn jsd_limit_and_bad_beta() {
        let eps: f64 = 1e-12;
        let teacher = t(&[vec![(1.0 - eps).ln(), eps.ln()]]);
        let student = t(&[vec![eps.ln(), (1.0 - eps).ln()]]);
        let opts = LogitOptions {
            temperature: 1.0,
            ..Default::default()
        };
        let l = value(|g| {
            let s = g.constant(student.clone());
            jsd_rows(g, &teacher, s, 0.5, &opts)
        });
        assert!((l - 2f64.ln()).abs() < 1e-6);
        for b in [0.0, 1.0, -0.5, f64::NAN] {
            let mut g = Graph::new();
            let s = g.constant(student.clone());
            assert!(matches!(jsd_rows(&mut g, &teacher, s, b, &opts), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn mse_examples() {
        let l = value(|g| {
            let s = g.constant(t(&[vec![0.0, 0.0]]));
            mse_rows(g, &t(&[vec![1.0, 1.0]]), s)
        });
        assert_eq!(l, 1.0);
        let mut g = Graph::new();
        let s = g.constant(t(&[vec![0.0, 0.0, 0.0]]));
        assert!(matches!(
            mse_rows(&mut g, &t(&[vec![1.0, 1.0]]), s),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn standardize_examples() {
        let z = standardize_values(&t(&[vec![1.0, 2.0, 3.0], vec![4.0, 4.0, 4.0]])).unwrap();
        let k = 1.5f64.sqrt();
        for (a, b) in z.row(0).iter().zip([-k, 0.0, k]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((z.row(0)[2] - 1.22474).abs() < 1e-5);
        assert_eq!(z.row(1), &[0.0, 0.0, 0.0]);
        assert!(standardize_values(&t(&[vec![1.0]])).is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut g = Graph::new();
        let s = g.constant(t(&[vec![0.0, 1.0]]));
        let r = kl_rows(&mut g, &t(&[vec![0.0, 1.0]]), s, KlDirection::Forward, &LogitOptions::at(0.0));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
