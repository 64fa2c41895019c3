use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every scalar knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// DP concentration (initial value when it is resampled).
    pub alpha: f64,
    /// Symmetric Dirichlet parameter of the base measure.
    pub gamma: f64,
    /// Number of auxiliary (empty) feature slots.
    pub m: usize,
    /// Probability of proposing a new feature from the data.
    pub rho: f64,
    /// Iterations between synchronization steps.
    pub sync_interval: usize,
    pub n_workers: usize,
    /// Iterations of the approximate stage before the exact stage starts.
    pub accel_iters: usize,
    pub total_iters: usize,
    pub seed: u64,
    /// Pseudo-count added to every coordinate when a data point is turned
    /// into a feature location.
    pub smoothing_eps: f64,
    /// Resample the concentration at every synchronization step.
    pub resample_alpha: bool,
    /// Shape and rate of the Gamma hyperprior on the concentration.
    pub alpha_prior_shape: f64,
    pub alpha_prior_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            m: 3,
            rho: 0.9,
            sync_interval: 10,
            n_workers: 10,
            accel_iters: 50,
            total_iters: 1000,
            seed: 0,
            smoothing_eps: 1e-6,
            resample_alpha: true,
            alpha_prior_shape: 1.0,
            alpha_prior_rate: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if self.sync_interval == 0 {
            return bad("sync interval must be at least 1".into());
        }
        if self.n_workers == 0 {
            return bad("at least one worker is required".into());
        }
        if self.accel_iters > self.total_iters {
            return bad(format!(
                "accel_iters ({}) exceeds total_iters ({})",
                self.accel_iters, self.total_iters
            ));
        }
        if !(self.smoothing_eps >= 0.0 && self.smoothing_eps.is_finite()) {
            return bad(format!(
                "smoothing_eps must be non-negative, got {}",
                self.smoothing_eps
            ));
        }
        if !(self.alpha_prior_shape > 0.0 && self.alpha_prior_rate > 0.0) {
            return bad("alpha hyperprior shape and rate must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.sync_interval, 10);
        assert_eq!(c.accel_iters, 50);
        assert_eq!(c.total_iters, 1000);
    }

    #[test]
    fn rejects_out_of_range() {
        let base = ModelConfig::default();
        let cases = [
            ModelConfig { rho: 1.5, ..base.clone() },
            ModelConfig { alpha: 0.0, ..base.clone() },
            ModelConfig { gamma: -1.0, ..base.clone() },
            ModelConfig { m: 0, ..base.clone() },
            ModelConfig { accel_iters: 2000, ..base.clone() },
            ModelConfig { n_workers: 0, ..base.clone() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
