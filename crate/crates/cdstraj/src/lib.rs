//! Multi-agent vehicle trajectory prediction: a diffusion model simulates
//! neighbor futures, a spatial-temporal encoder fuses them with agent
//! histories, and a recurrent decoder emits per-step bivariate Gaussians
//! over future positions.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;
pub mod stencoder;

pub use error::{CdsError, Result};
