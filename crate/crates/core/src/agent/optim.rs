//! Momentum SGD with a stepwise-exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use super::net::AgentParams;
use super::nn::Grads;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub decay: f64,
    pub decay_interval: u64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: 0.05,
            decay: 0.1,
            decay_interval: 300_000,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.decay > 0.0 && self.decay_interval > 0) {
            return Err(Error::Config("learning-rate schedule out of range".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `lr_init · decay^(step / decay_interval)`, continuous in `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr_init * self.decay.powf(step as f64 / self.decay_interval as f64)
    }
}

/// Velocity buffers aligned with the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum(pub Grads);

impl Momentum {
    pub fn zeros(params: &AgentParams) -> Self {
        Momentum(params.params.zeros_like())
    }
}

/// `v ← μ·v + g; θ ← θ − lr(step)·v`.
pub fn sgd_step(
    params: &mut AgentParams,
    grads: &Grads,
    momentum: &mut Momentum,
    step: u64,
    config: &OptimConfig,
) -> Result<()> {
    if grads.0.len() != params.params.tensors.len() || momentum.0 .0.len() != grads.0.len() {
        return Err(Error::Config("gradient layout does not match parameters".into()));
    }
    let lr = config.learning_rate(step);
    for ((t, g), v) in params.params.tensors.iter_mut().zip(&grads.0).zip(momentum.0 .0.iter_mut()) {
        if t.data.len() != g.len() || v.len() != g.len() {
            return Err(Error::Config(format!("gradient for {} has wrong size", t.name)));
        }
        for ((w, gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = config.momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
