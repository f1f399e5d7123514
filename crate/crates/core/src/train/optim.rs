use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(&sizes)
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::Contract(format!(
                "slot {i}: parameter of {} values, gradient of {}, state of {}",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            if cfg.weight_decay != 0.0 {
                *x -= lr * cfg.weight_decay * *x;
            }
            *x -= lr * mhat / (math::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    math::sqrt(grads.iter().flatten().map(|g| g * g).sum())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[vec![0.0; 3]], &mut st, 1e-2, &AdamWConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        for g in [3.0, -0.25, 1e3] {
            let mut p = Tensor::scalar(1.0).reshape(vec![1]).unwrap();
            let mut st = AdamState::new(&[1]);
            adamw_step(&mut [&mut p], &[vec![g]], &mut st, 0.1, &AdamWConfig::default()).unwrap();
            let delta = p.data()[0] - 1.0;
            let expect = -0.1 * g / (g.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15);
            assert!((delta + 0.1 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        let r = adamw_step(&mut [&mut p], &[vec![0.0; 3]], &mut st, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = adamw_step(&mut [&mut p], &[], &mut st, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }
}
