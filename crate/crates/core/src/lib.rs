//! Long-tailed classification with logit-adjusted expert ensembles.
//!
//! Each expert is trained with a logit-adjusted cross-entropy that targets the
//! label prior `p_train^λ`; averaging the experts in log space targets
//! `p_train^λ̄`. With λ̄ = 0 the ensemble's argmax is the balanced Bayes rule,
//! provided every expert is calibrated. Mixup is the calibration tool.
//!
//! Modules:
//! - [`priors`]: label distributions, long-tailed profiles, the λ family
//! - [`data`]: Gaussian mixtures with exact posteriors, CSV I/O, shifted resampling
//! - [`mixup`]: Beta-weighted pair mixing
//! - [`model`]: trunk + expert heads, losses, SGD trainer
//! - [`ensemble`]: log-space combination, posthoc adjustment, oracle experts
//! - [`metrics`]: balanced error, ECE/MCE, reliability bins, KL diagnostics
//! - [`config`] / [`cli`]: experiment configuration and command-line driver

pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod numeric;
pub mod par;
pub mod priors;

pub use error::{Error, Result};
