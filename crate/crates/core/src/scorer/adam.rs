use serde::{Deserialize, Serialize};

use super::{Gradient, ScorerParams};
use crate::error::{Error, Result};

/// Bias-corrected Adam. Steps minimize; callers doing gradient ascent pass
/// the negated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ScorerParams, grad: &Gradient, lr: f64) -> Result<()> {
        self.step_slice(params.values_mut(), grad.values(), lr)
    }

    pub fn step_slice(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(3);
        let mut p = vec![0.5, -1.0, 2.0];
        adam.step_slice(&mut p, &[0.0; 3], 1e-2).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut adam = AdamState::new(3);
        let mut p = vec![0.0; 3];
        let lr = 1e-3;
        adam.step_slice(&mut p, &[3.0, -0.02, 1e3], lr).unwrap();
        assert!((p[0] + lr).abs() < 1e-9);
        assert!((p[1] - lr).abs() < 1e-9);
        assert!((p[2] + lr).abs() < 1e-9);
    }

    /// Independent scalar Adam.
    fn scalar_adam(mut x: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        let grads = [0.4, 0.4, -1.5, 0.01, 2.5];
        let mut adam = AdamState::new(1);
        let mut p = vec![0.3];
        for g in grads {
            adam.step_slice(&mut p, &[g], 0.05).unwrap();
        }
        assert!((p[0] - scalar_adam(0.3, &grads, 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut adam = AdamState::new(2);
        let mut p = vec![0.0; 2];
        assert!(adam.step_slice(&mut p, &[f64::NAN, 0.0], 1e-3).is_err());
        assert_eq!(adam.step, 0);
    }
}
