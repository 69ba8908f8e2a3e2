use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Standard betas and epsilon with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one optimized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Tensor,
    second_moment: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }

    /// Bias-corrected Adam update applied to `var` in place.
    pub fn update(&mut self, var: &mut Tensor, grad: &Tensor) -> Result<()> {
        if var.shape() != grad.shape() || var.shape() != self.first_moment.shape() {
            return Err(Error::Shape(format!(
                "adam: variable {:?}, gradient {:?}, moments {:?}",
                var.shape(),
                grad.shape(),
                self.first_moment.shape()
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((x, &g), m), v) in var.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated variable and advances `state`.
pub fn adam_step(var: &Tensor, grad: &Tensor, state: &mut AdamState) -> Result<Tensor> {
    let mut out = var.clone();
    state.update(&mut out, grad)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{uniform_init, Rng};
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_variable() {
        let var = uniform_init(&[2, 3], -1.0, 1.0, &mut Rng::new(1)).unwrap();
        let mut state = AdamState::new(&[2, 3], AdamConfig::with_lr(0.1));
        let out = adam_step(&var, &Tensor::zeros(&[2, 3]), &mut state).unwrap();
        assert_eq!(out, var);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // t=1, g=1: m=0.1, v=0.001, m_hat=1, v_hat=1, step = 0.1/(1+1e-8).
        let var = Tensor::new(vec![1], vec![0.0]).unwrap();
        let grad = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut state = AdamState::new(&[1], AdamConfig::with_lr(0.1));
        let out = adam_step(&var, &grad, &mut state).unwrap();
        let m = (1.0 - 0.9) * 1.0;
        let v = (1.0 - 0.999) * 1.0;
        let expected = -0.1 * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999f64)).sqrt() + 1e-8);
        assert!((out.data()[0] - expected).abs() < 1e-12);
        assert!((out.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let var = uniform_init(&[8], -1.0, 1.0, &mut Rng::new(2)).unwrap();
        let grad = uniform_init(&[8], -1.0, 1.0, &mut Rng::new(3)).unwrap();
        let run = || {
            let mut s = AdamState::new(&[8], AdamConfig::with_lr(0.1));
            let a = adam_step(&var, &grad, &mut s).unwrap();
            adam_step(&a, &grad, &mut s).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(&[2], AdamConfig::with_lr(0.1));
        let r = adam_step(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &mut state);
        assert!(matches!(r, Err(Error::Shape(_))));
        let r = adam_step(&Tensor::zeros(&[3]), &Tensor::zeros(&[3]), &mut state);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn zero_lr_is_identity(
            var in proptest::collection::vec(-5.0f64..5.0, 4),
            grad in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let var = Tensor::new(vec![4], var).unwrap();
            let grad = Tensor::new(vec![4], grad).unwrap();
            let mut state = AdamState::new(&[4], AdamConfig::with_lr(0.0));
            let out = adam_step(&var, &grad, &mut state).unwrap();
            prop_assert_eq!(out, var);
        }
    }
}
