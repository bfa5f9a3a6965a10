//! Forecasting toolkit built around spectral energy amplification.
//!
//! The crate provides a small f64 tensor/autodiff core, DFT-based spectral
//! analysis (spectrum flipping, energy accounting, band filtering), the
//! Amplifier forecasting model with its semi-channel-interaction block and
//! seasonal-trend forecaster, two linear baselines plus a generic energy-
//! amplification wrapper, a CSV data pipeline, an Adam training engine with
//! checkpoints, and experiment runners (synthetic tasks, ablations, probes).

pub mod error;
mod fft;
mod kernels;
pub mod tensor;

pub use error::{AmpError, Result};
