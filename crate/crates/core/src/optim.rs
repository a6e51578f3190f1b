//! AdamW with bias-corrected moments and decoupled weight decay.

use crate::config::OptimConfig;
use crate::error::{ComaError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyperparameters of a single update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &OptimConfig, lr: f64) -> Self {
        Self { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay }
    }
}

/// Updates one flat parameter in place. `t` is the 1-based step count.
///
/// `θ ← θ(1 − lr·λ)`, then `θ ← θ − lr·m̂/(√v̂ + ε)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    h: &AdamHyper,
    decay: bool,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(ComaError::Usage("optimizer step count starts at 1".into()));
    }
    let n = theta.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(ComaError::Invariant("parameter, gradient and moment lengths differ".into()));
    }
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::of(1.0 - h.beta1.powf(t as f64));
    let c2 = T::of(1.0 - h.beta2.powf(t as f64));
    let lr = T::of(h.lr);
    let eps = T::of(h.eps);
    let shrink = if decay { T::one() - T::of(h.lr * h.weight_decay) } else { T::one() };
    for i in 0..n {
        let g = grad[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] = theta[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let z: Vec<_> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: z.clone(), v: z }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let eq = |a: &[Tensor<T>], b: &[Tensor<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y));
        eq(&self.m, &other.m) && eq(&self.v, &other.v)
    }
}

/// One AdamW step over every parameter; decay only where the parameter is flagged for it.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    h: &AdamHyper,
    t: u64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(ComaError::Invariant("gradient or moment count differs from parameter count".into()));
    }
    let decay: Vec<bool> = params.specs().iter().map(|s| s.decay).collect();
    for (i, theta) in params.values_mut().iter_mut().enumerate() {
        theta.expect_same_shape(&grads[i])?;
        adamw_update(
            theta.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            h,
            decay[i],
            t,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut theta = vec![0.3_f64, -1.2, 4.0];
        let before = theta.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adamw_update(&mut theta, &[0.0; 3], &mut m, &mut v, &hyper(0.0), true, 1).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn first_step_is_sign_like() {
        let g = [0.5_f64, -2.0, 1e-3];
        let mut theta = vec![0.0_f64; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let h = hyper(0.0);
        adamw_update(&mut theta, &g, &mut m, &mut v, &h, true, 1).unwrap();
        for i in 0..3 {
            let want = -h.lr * g[i] / (g[i].abs() + h.eps);
            assert!((theta[i] - want).abs() < 1e-15, "{i}: {} vs {want}", theta[i]);
        }
    }

    #[test]
    fn decay_skips_flagged_parameters() {
        let mut a = vec![1.0_f64];
        let mut b = vec![1.0_f64];
        let h = hyper(0.5);
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut a, &[0.0], &mut m, &mut v, &h, true, 1).unwrap();
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut b, &[0.0], &mut m, &mut v, &h, false, 1).unwrap();
        assert!((a[0] - (1.0 - 1e-3 * 0.5)).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn step_zero_rejected() {
        let mut t = vec![0.0_f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        assert!(adamw_update(&mut t, &[1.0], &mut m, &mut v, &hyper(0.0), true, 0).is_err());
    }
}
