//! SGD with classical momentum and L2 weight decay folded into the
//! gradient, plus the cosine learning-rate schedule used by every trainer.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensor. Parameter order is fixed at model construction
/// and shared by optimizer state, gradients, and checkpoints.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
pub struct Sgd {
    velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &[Param], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            momentum,
            weight_decay,
        }
    }

    /// One update over all parameters. Gradients must be keyed identically
    /// to the parameter list, in the same order.
    pub fn step(&mut self, params: &mut [Param], grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((param, (gname, grad)), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if param.name != *gname {
                return Err(Error::Contract(format!(
                    "gradient key {:?} does not match parameter {:?}",
                    gname, param.name
                )));
            }
            if param.value.shape() != grad.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for parameter {:?} of shape {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                )));
            }
            for i in 0..vel.numel() {
                let g = grad.data()[i] + self.weight_decay * param.value.data()[i];
                let v = self.momentum * vel.data()[i] + g;
                vel.data_mut()[i] = v;
                param.value.data_mut()[i] -= lr * v;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 toward 0 at `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Param> {
        vec![Param::new("w", Tensor::scalar(v))]
    }

    fn grad(g: f64) -> Vec<(String, Tensor)> {
        vec![("w".to_string(), Tensor::scalar(g))]
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut params = one_param(1.0);
        let mut opt = Sgd::new(&params, 0.0, 0.0);
        opt.step(&mut params, &grad(1.0), 0.1).unwrap();
        assert!((params[0].value.data()[0] - 0.9).abs() < 1e-15);
    }

    /// Hand-computed two-step momentum recurrence: with constant gradient g,
    /// v1 = g and v2 = m*g + g, so the total displacement is lr*g*(2 + m).
    #[test]
    fn momentum_accumulates_velocity() {
        let (lr, m, g) = (0.1, 0.9, 2.0);
        let mut params = one_param(0.0);
        let mut opt = Sgd::new(&params, m, 0.0);
        opt.step(&mut params, &grad(g), lr).unwrap();
        opt.step(&mut params, &grad(g), lr).unwrap();
        let expect = -lr * g * (2.0 + m);
        assert!((params[0].value.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut params = one_param(1.0);
        let mut opt = Sgd::new(&params, 0.0, 0.1);
        opt.step(&mut params, &grad(0.0), 1.0).unwrap();
        assert!((params[0].value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn mismatched_keys_are_a_contract_error() {
        let mut params = one_param(1.0);
        let mut opt = Sgd::new(&params, 0.0, 0.0);
        let bad = vec![("b".to_string(), Tensor::scalar(0.0))];
        assert!(matches!(
            opt.step(&mut params, &bad, 0.1),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.5, 0, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(0.5, 9, 10) < 0.02);
        assert!((cosine_lr(0.5, 5, 10) - 0.25).abs() < 1e-15);
    }
}
