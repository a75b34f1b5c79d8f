//! Run configuration.
//!
//! A JSON document with optional keys; anything missing falls back to the
//! published defaults, anything unknown is rejected. All downstream modules
//! take their hyperparameters from here so a single file pins a whole run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::has::ScheduleKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Boundary-weight amplification for the entropy-adaptive loss.
    #[serde(default = "default_alpha_ube")]
    pub alpha_ube: f64,
    /// Weight of the prototype-contrastive term in the total loss.
    #[serde(default = "default_lambda_gap")]
    pub lambda_gap: f64,
    /// Contrastive temperature.
    #[serde(default = "default_tau_gap")]
    pub tau_gap: f64,
    /// Prototype momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// EMA decay for per-image hardness scores.
    #[serde(default = "default_beta_has")]
    pub beta_has: f64,
    /// Steepness of the sigmoid sampling-threshold decay.
    #[serde(default = "default_k_has")]
    pub k_has: f64,
    /// Transition midpoint of the threshold decay, in iterations.
    /// When absent, callers resolve it to half the run length.
    #[serde(default)]
    pub midpoint_has: Option<u64>,
    /// Temperature of the hardness sampling softmax.
    #[serde(default = "default_tau_has")]
    pub tau_has: f64,
    /// Hardness scores flush every this many iterations.
    #[serde(default = "default_ema_period")]
    pub ema_period: u64,
    /// Kernel sizes for the thin/medium/thick boundary bands.
    #[serde(default = "default_granularity_kernels")]
    pub granularity_kernels: [usize; 3],
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Dimensionality of boundary features and prototypes.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleKind,
}

fn default_alpha_ube() -> f64 {
    3.0
}
fn default_lambda_gap() -> f64 {
    0.5
}
fn default_tau_gap() -> f64 {
    0.07
}
fn default_momentum() -> f64 {
    0.99
}
fn default_beta_has() -> f64 {
    0.9
}
fn default_k_has() -> f64 {
    0.05
}
fn default_tau_has() -> f64 {
    1.0
}
fn default_ema_period() -> u64 {
    50
}
fn default_granularity_kernels() -> [usize; 3] {
    [3, 5, 7]
}
fn default_num_classes() -> usize {
    19
}
fn default_feature_dim() -> usize {
    256
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config must deserialize")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_ube.is_finite() || self.alpha_ube < 0.0 {
            return Err(Error::validation("alpha_ube", "must be finite and >= 0"));
        }
        if !self.lambda_gap.is_finite() || self.lambda_gap < 0.0 {
            return Err(Error::validation("lambda_gap", "must be finite and >= 0"));
        }
        if !self.tau_gap.is_finite() || self.tau_gap <= 0.0 {
            return Err(Error::validation("tau_gap", "must be > 0"));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if !self.beta_has.is_finite() || self.beta_has <= 0.0 || self.beta_has >= 1.0 {
            return Err(Error::validation("beta_has", "must lie in (0, 1)"));
        }
        if !self.k_has.is_finite() || self.k_has < 0.0 {
            return Err(Error::validation("k_has", "must be finite and >= 0"));
        }
        if !self.tau_has.is_finite() || self.tau_has <= 0.0 {
            return Err(Error::validation("tau_has", "must be > 0"));
        }
        if self.ema_period == 0 {
            return Err(Error::validation("ema_period", "must be >= 1"));
        }
        let k = &self.granularity_kernels;
        if k.iter().any(|&v| v % 2 == 0 || v == 0) {
            return Err(Error::validation("granularity_kernels", "kernels must be odd"));
        }
        if !(k[0] < k[1] && k[1] < k[2]) {
            return Err(Error::validation(
                "granularity_kernels",
                "kernels must be strictly increasing",
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim", "must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }
}
