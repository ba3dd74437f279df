//! Deep survival machines.
//!
//! Fully parametric survival regression for right-censored data with
//! competing risks. Each subject's event-time distribution is a mixture of
//! Weibull or Log-Normal primitives whose gating weights and parameters are
//! produced from a shared multilayer perceptron representation. The crate
//! also carries the evaluation side: Kaplan-Meier, IPCW time-dependent
//! concordance, censoring-weighted Brier score, a ridge Cox model used for
//! representation transfer, and a synthetic competing-risks generator.

pub mod baselines;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{DsmError, Result};
