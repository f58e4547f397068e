//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor in `params` using its stored grad.
    ///
    /// Moment buffers are allocated on the first call; later calls must pass
    /// the same tensors in the same order.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {}", self.first.len(), params.len())));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.is_none() {
                return Err(Error::State(format!("parameter {i} has no gradient")));
            }
            if self.first[i].len() != p.len() {
                return Err(Error::Shape(format!("parameter {i} changed size")));
            }
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let t = self.step as i32;
        let corr1 = F::one() - b1.powi(t);
        let corr2 = F::one() - b2.powi(t);
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
