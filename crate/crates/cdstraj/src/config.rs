use serde::{Deserialize, Serialize};

use crate::error::{CdsError, Result};
use crate::rng::fnv1a;

/// One document covering model dimensions, the diffusion schedule, data
/// assembly, and the two-stage training loop. Serialized as JSON; every key
/// falls back to its default so partial config files are fine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // model
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
    // diffusion
    pub gamma: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub k_samples: usize,
    // data assembly
    pub n_max: usize,
    pub neighbor_radius_m: f64,
    pub split_fractions: (f64, f64, f64),
    // training
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub grad_clip_norm: f64,
    pub nll_weight_alpha: f64,
    pub diffusion_loss_weight: f64,
    pub seed: u64,
    pub teacher_mode: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            hidden_dim: 64,
            n_heads: 4,
            latent_dim: 32,
            leaky_slope: 0.1,
            gamma: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
            k_samples: 5,
            n_max: 8,
            neighbor_radius_m: 30.0,
            split_fractions: (0.8, 0.1, 0.1),
            stage1_epochs: 40,
            stage2_epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            grad_clip_norm: 5.0,
            nll_weight_alpha: 1.0,
            diffusion_loss_weight: 1.0,
            seed: 1,
            teacher_mode: true,
        }
    }
}

impl Config {
    /// Desk-scale configuration: small enough to train in minutes on one
    /// core, large enough to fit the synthetic scenario families. The
    /// near-linear embedding slope and small batches came out of tuning
    /// runs on the constant-velocity overfit task.
    pub fn tiny() -> Self {
        Config {
            hidden_dim: 16,
            n_heads: 4,
            latent_dim: 8,
            gamma: 20,
            leaky_slope: 0.9,
            stage1_epochs: 200,
            stage2_epochs: 50,
            batch_size: 4,
            learning_rate: 5e-4,
            ..Config::default()
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient-check harness.
    pub fn gradcheck_tiny() -> Self {
        Config {
            hidden_dim: 8,
            n_heads: 2,
            latent_dim: 4,
            gamma: 4,
            n_max: 2,
            k_samples: 2,
            ..Config::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CdsError::Config(msg));
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.n_heads == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0,1)", self.leaky_slope));
        }
        if self.gamma == 0 {
            return bad("gamma must be at least 1".into());
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return bad(format!(
                "beta bounds ({}, {}) must satisfy 0 < min <= max < 1",
                self.beta_min, self.beta_max
            ));
        }
        if self.k_samples == 0 {
            return bad("k_samples must be at least 1".into());
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1".into());
        }
        if self.neighbor_radius_m <= 0.0 {
            return bad("neighbor_radius_m must be positive".into());
        }
        let (a, b, c) = self.split_fractions;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions ({a}, {b}, {c}) must be positive and sum to 1"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive".into());
        }
        if self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Stable hash of the canonical JSON form; stored in checkpoints so a
    /// resume with a different config is caught early.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}
