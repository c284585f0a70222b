//! Plain stochastic gradient descent with an exponential per-epoch decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("decay factor must lie in (0, 1], got {0}")]
    DecayFactor(f64),
    #[error("decay epoch must be at least 1")]
    DecayEpoch,
    #[error("expected {expected} gradients, got {found}")]
    GradientCount { expected: usize, found: usize },
    #[error("gradient for parameter {name} has shape {found:?}, expected {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Last epoch trained at the base rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay_epoch: 100,
            decay_factor: 0.98,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::LearningRate(self.learning_rate));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(OptimError::DecayFactor(self.decay_factor));
        }
        if self.decay_epoch == 0 {
            return Err(OptimError::DecayEpoch);
        }
        Ok(())
    }

    /// `learning_rate * decay_factor^max(0, epoch - decay_epoch)`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let excess = epoch.saturating_sub(self.decay_epoch);
        self.learning_rate * self.decay_factor.powi(excess.min(i32::MAX as usize) as i32)
    }
}

/// One descent step `p <- p - lr(epoch) * g` over every parameter.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::GradientCount {
            expected: params.len(),
            found: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(OptimError::GradientShape {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let lr = cfg.lr_at(epoch);
    for (p, g) in params.tensors_mut().zip(grads) {
        for (w, dw) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * dw;
        }
    }
    Ok(())
}
