use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
    let one = T::one();
    let corr1 = T::from_f64(1.0 - hp.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - hp.beta2.powi(t));
    let lr = T::from_f64(hp.learning_rate);
    let eps = T::from_f64(hp.eps);

    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = lr * (m / corr1) / ((v / corr2).sqrt() + eps);
        let next = params[i] - update;
        if !next.is_finite() {
            return Err(Error::Numeric(format!(
                "adam_step produced a non-finite parameter at index {i}"
            )));
        }
        params[i] = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamParams::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3f64, -7.0] {
            let mut p = vec![0.0f64];
            let mut s = AdamState::new(1);
            let hp = AdamParams { learning_rate: 0.01, ..Default::default() };
            adam_step(&mut p, &[g], &mut s, &hp).unwrap();
            // m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps).
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-15);
            assert!((p[0] + 0.01 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn descends_on_quadratic() {
        let mut x = vec![1.0f64];
        let mut s = AdamState::new(1);
        let hp = AdamParams { learning_rate: 0.1, ..Default::default() };
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut s, &hp).unwrap();
        }
        assert!(x[0].abs() < 1.0);
        assert_eq!(s.step, 100);
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0f64; 2];
        let mut s = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut s, &AdamParams::default()).is_err());
    }
}
