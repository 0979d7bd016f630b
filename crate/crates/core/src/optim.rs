//! Adam optimizer.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        let zeros = |p: &crate::params::Param<T>| vec![T::zero(); p.value.len()];
        Self {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update; clears the gradients afterwards.
///
/// If any gradient is non-finite nothing is modified (gradients included)
/// and the offending parameter is reported.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameter set".into()));
    }
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::c(state.beta1);
    let b2 = T::c(state.beta2);
    let one = T::one();
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    // lr * sqrt(bc2) / bc1 folded into one step size, eps rescaled to match
    // the textbook form m_hat / (sqrt(v_hat) + eps).
    let step_size = T::c(state.lr * bc2.sqrt() / bc1);
    let eps = T::c(state.eps * bc2.sqrt());
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let (value, grad) = (p.value.data_mut(), p.grad.data_mut());
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            value[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            grad[i] = T::zero();
        }
    }
    Ok(())
}
