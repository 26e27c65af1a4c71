use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and coupled L2 weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update. `params[i]` and `grads[i]` must have equal length,
    /// and the parameter list must keep the same layout across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first_moment[i].len() != p.len() {
                return Err(Error::Contract(format!(
                    "parameter {i}: {} values, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let grad = g[j] + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
