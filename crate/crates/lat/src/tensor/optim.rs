//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{LatError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: first/second-moment accumulators aligned with a fixed
/// parameter list. Updates are deterministic: identical state and gradients
/// produce bitwise-identical parameters.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one bias-corrected update using the gradients stored on
    /// `params`, then clear those gradients. Errors before touching any
    /// parameter if a gradient is missing, misaligned, or non-finite.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(LatError::Contract(format!(
                "adam_step: state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                LatError::Contract(format!("adam_step: parameter {i} has no gradient"))
            })?;
            if g.len() != self.m[i].len() {
                return Err(LatError::Contract(format!(
                    "adam_step: parameter {i} gradient length {} vs state {}",
                    g.len(),
                    self.m[i].len()
                )));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(LatError::NonFinite { op: "adam_step" });
            }
            grads.push(g);
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut values = p.values();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.set_values(&values)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_grad(p: &Tensor, g: &[f64]) {
        // drive the leaf through a real graph so grad slots are populated
        let w = Tensor::from_vec(&[g.len()], g.to_vec()).unwrap();
        let loss = p.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        fake_grad(&p, &[0.0, 0.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&[p.clone()]).unwrap();
        assert_eq!(p.values(), vec![1.0, -2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // bias-corrected first step: m_hat = g, v_hat = g^2 -> update = -lr*sign(g)
        let p = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        fake_grad(&p, &[0.3, -2.0]);
        let mut adam = AdamState::new(0.05);
        adam.step(&[p.clone()]).unwrap();
        let v = p.values();
        assert!((v[0] + 0.05).abs() < 1e-6, "{v:?}");
        assert!((v[1] - 0.05).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn non_finite_gradient_errors_before_mutation() {
        // sqrt at exactly 0 has an infinite derivative; the forward value is
        // finite so the op succeeds and the bad value appears in the gradient
        let p = Tensor::param(&[1], vec![0.0]).unwrap();
        let loss = p.sqrt().unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(p.grad().unwrap()[0].is_infinite());
        let mut adam = AdamState::new(0.1);
        let err = adam.step(&[p.clone()]).unwrap_err();
        assert!(matches!(err, LatError::NonFinite { .. }));
        assert_eq!(p.values(), vec![0.0]);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let p = Tensor::param(&[1], vec![3.0]).unwrap();
        let mut adam = AdamState::new(0.1);
        let err = adam.step(&[p.clone()]).unwrap_err();
        assert!(matches!(err, LatError::Contract(_)));
        assert_eq!(p.values(), vec![3.0]);
    }

    #[test]
    fn identical_state_and_grads_give_bitwise_identical_updates() {
        let run = || {
            let p = Tensor::param(&[3], vec![0.5, -1.5, 2.0]).unwrap();
            let mut adam = AdamState::new(0.01);
            for _ in 0..5 {
                fake_grad(&p, &[0.1, 0.2, -0.3]);
                adam.step(&[p.clone()]).unwrap();
            }
            p.values()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
