//! Batch normalization over the rows of a `[batch, features]` matrix.
//!
//! Train mode normalizes with the (biased) batch statistics and folds them
//! into running averages with momentum 0.1; eval mode normalizes with the
//! running averages. Variance epsilon is 1e-5.

use std::cell::RefCell;

use super::Tensor;
use crate::error::{LatError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub features: usize,
}

impl BatchNorm {
    pub fn new(features: usize) -> BatchNorm {
        // scale starts at 1, shift at 0
        BatchNorm {
            gamma: Tensor::param(&[features], vec![1.0; features]).expect("finite"),
            beta: Tensor::zeros_param(&[features]),
            running_mean: RefCell::new(vec![0.0; features]),
            running_var: RefCell::new(vec![1.0; features]),
            features,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(LatError::shape(
                "batch_norm",
                format!("input {:?}, layer expects [batch, {}]", shape, self.features),
            ));
        }
        let batch = shape[0];
        match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(LatError::Degenerate(
                        "batch_norm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let mu = x.mean_axis(0)?;
                let centered = x.sub(&mu.expand_rows(batch)?)?;
                let var = centered.mul(&centered)?.mean_axis(0)?;
                {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    let mu_v = mu.values();
                    let var_v = var.values();
                    for i in 0..self.features {
                        rm[i] = (1.0 - BN_MOMENTUM) * rm[i] + BN_MOMENTUM * mu_v[i];
                        rv[i] = (1.0 - BN_MOMENTUM) * rv[i] + BN_MOMENTUM * var_v[i];
                    }
                }
                let denom = var.offset(BN_EPS)?.sqrt()?.expand_rows(batch)?;
                let normed = centered.div(&denom)?;
                normed
                    .mul(&self.gamma.expand_rows(batch)?)?
                    .add(&self.beta.expand_rows(batch)?)
            }
            Mode::Eval => {
                if batch == 0 {
                    return Err(LatError::Degenerate("batch_norm of an empty batch".into()));
                }
                let rm = Tensor::from_vec(&[self.features], self.running_mean.borrow().clone())?;
                let rv = Tensor::from_vec(&[self.features], self.running_var.borrow().clone())?;
                let centered = x.sub(&rm.expand_rows(batch)?)?;
                let denom = rv.offset(BN_EPS)?.sqrt()?.expand_rows(batch)?;
                let normed = centered.div(&denom)?;
                normed
                    .mul(&self.gamma.expand_rows(batch)?)?
                    .add(&self.beta.expand_rows(batch)?)
            }
        }
    }

    pub fn params(&self) -> Vec<(&'static str, Tensor)> {
        vec![("gamma", self.gamma.clone()), ("beta", self.beta.clone())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let bn = BatchNorm::new(2);
        let x = Tensor::from_vec(&[3, 2], vec![4.0; 6]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for v in y.values() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gamma_pins_output_to_beta() {
        let bn = BatchNorm::new(2);
        bn.gamma.set_values(&[0.0, 0.0]).unwrap();
        bn.beta.set_values(&[1.5, -2.0]).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.values(), vec![1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn hand_normalized_two_row_batch() {
        // rows [0], [2]: mean 1, biased var 1 -> approx [-1], [1]
        let bn = BatchNorm::new(1);
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap().values();
        assert!((y[0] + 1.0).abs() < 1e-4);
        assert!((y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let bn = BatchNorm::new(2);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let err = bn.forward(&x, Mode::Train).unwrap_err();
        assert!(matches!(err, LatError::Degenerate(_)));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let bn = BatchNorm::new(1);
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // running mean = 0.9*0 + 0.1*1 = 0.1; running var = 0.9*1 + 0.1*1 = 1.0
        assert!((bn.running_mean.borrow()[0] - 0.1).abs() < 1e-12);
        assert!((bn.running_var.borrow()[0] - 1.0).abs() < 1e-12);
        let y = bn.forward(&x, Mode::Eval).unwrap().values();
        let expect0 = (0.0 - 0.1) / (1.0 + BN_EPS).sqrt();
        assert!((y[0] - expect0).abs() < 1e-12);
    }
}
