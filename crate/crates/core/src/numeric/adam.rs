//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment estimates for every parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Tensor<F>>,
    pub second_moment: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>], hyper: AdamHyper) -> Result<Self> {
        if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate must be positive, got {}",
                hyper.lr
            )));
        }
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            hyper,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(shape_err(
                    "adam_step",
                    format!(
                        "param {i}: {:?} vs grad {:?} vs state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first_moment[i].shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let b1 = F::from_f64_lossy(h.beta1);
        let b2 = F::from_f64_lossy(h.beta2);
        let one = F::one();
        let correction1 = F::from_f64_lossy(1.0 - h.beta1.powi(t));
        let correction2 = F::from_f64_lossy(1.0 - h.beta2.powi(t));
        let lr = F::from_f64_lossy(h.lr);
        let eps = F::from_f64_lossy(h.epsilon);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / correction1;
                let v_hat = *vv / correction2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(p: f64) -> (Vec<Tensor<f64>>, AdamState<f64>) {
        let params = vec![Tensor::scalar(p)];
        let state = AdamState::new(&params, AdamHyper::default()).unwrap();
        (params, state)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut params, mut state) = scalar_state(1.0);
        state.step(&mut params, &[Tensor::scalar(0.1)]).unwrap();
        // m_hat = 0.1, v_hat = 0.01 -> delta = -lr * 0.1 / (0.1 + 1e-8)
        let delta = params[0].item() - 1.0;
        let expected = -1e-4 * 0.1 / (0.1 + 1e-8);
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + 1e-4).abs() < 1e-10);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut params, mut state) = scalar_state(0.3);
        state.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(params[0].item(), 0.3);
    }

    #[test]
    fn constant_gradient_steps_bounded_by_lr() {
        let (mut params, mut state) = scalar_state(0.0);
        let mut prev = 0.0;
        for _ in 0..2 {
            state.step(&mut params, &[Tensor::scalar(-2.5)]).unwrap();
            let delta: f64 = params[0].item() - prev;
            assert!(delta.abs() <= 1e-4 * (1.0 + 1e-6));
            prev = params[0].item();
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let (mut params, mut state) = scalar_state(0.0);
        let bad = Tensor::<f64>::zeros(&[2]);
        assert!(state.step(&mut params, &[bad]).is_err());
        assert!(state.step(&mut params, &[]).is_err());
    }
}
