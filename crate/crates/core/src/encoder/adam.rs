use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer hyperparameters. Defaults follow the production schedule:
/// 4e-4 initial rate, multiplied by 0.98 every 10 000 steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 4e-4,
            decay_factor: 0.98,
            decay_interval: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.decay_factor > 0.0
            && self.decay_interval > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Moment accumulators and step counter for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        })
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// Step-decayed learning rate for the next update.
    pub fn effective_lr(&self) -> f64 {
        let c = &self.config;
        let drops = (self.step / c.decay_interval) as i32;
        c.base_lr * c.decay_factor.powi(drops)
    }

    /// One Adam update of `params` in place. A non-finite gradient aborts
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::shape(
                "adam_step",
                self.len(),
                format!("params {} / grads {}", params.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient at index {i}")));
        }
        let lr = self.effective_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    pub(crate) fn moments_finite(&self) -> bool {
        self.first_moment.iter().chain(&self.second_moment).all(|v| v.is_finite())
    }
}
