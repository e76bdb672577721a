use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer hyperparameters shared by every training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Learning rate before the first decay boundary.
    pub lr: f64,
    pub decay_factor: f64,
    /// Epochs at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            decay_factor: 0.1,
            decay_epochs: vec![5],
            total_epochs: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant step schedule: the base rate times `decay_factor` once
/// for every boundary at or below `epoch`.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    let passed = cfg.decay_epochs.iter().filter(|&&b| epoch >= b).count();
    cfg.lr * cfg.decay_factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(4, &cfg), 1e-4);
        assert!((lr_at(5, &cfg) - 1e-5).abs() < 1e-20);
        assert!((lr_at(15, &cfg) - 1e-5).abs() < 1e-20);
        let flat = OptimConfig { decay_epochs: vec![], ..cfg.clone() };
        assert_eq!(lr_at(12, &flat), 1e-4);
        let two = OptimConfig { decay_epochs: vec![2, 4], ..cfg };
        assert!((lr_at(4, &two) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn validation() {
        assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { decay_factor: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { decay_factor: 1.5, ..Default::default() }.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }
}
