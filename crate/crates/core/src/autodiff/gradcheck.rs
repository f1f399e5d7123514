use alloc::format;
use alloc::vec;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x, false);
    let out = f(&mut g, v)?;
    let y = g.item(out);
    if !y.is_finite() {
        return Err(Error::Numeric(format!("gradcheck objective evaluated to {y}")));
    }
    Ok(y)
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("gradcheck step {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let loss = f(&mut g, v)?;
    g.backward(loss)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
