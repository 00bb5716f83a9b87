//! Bayesian neural-field forecasting for incomplete sensor-network data.
//!
//! The library trains an ensemble of MAP-estimated neural fields directly on
//! incomplete spatio-temporal observations (no imputation step) and returns
//! point forecasts with calibrated prediction intervals. It ships with:
//!
//! - a self-contained reverse-mode autodiff substrate ([`autodiff`]),
//! - CSV ingestion, preprocessing and the station graph ([`data`]),
//! - simulators for four missing-data patterns plus site-based
//!   cross-validation splits ([`masking`]),
//! - the multilevel spatio-temporal feature encoder ([`encoder`]),
//! - the channel-gated residual stack and mean head ([`gated`]),
//! - MAP particle training and the predictive mixture ([`bayes`]),
//! - metrics, a historical-average baseline and the experiment runner
//!   ([`eval`]).
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `fieldcast` binary for the batch CLI.

pub mod autodiff;
pub mod bayes;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gated;
pub mod masking;
pub mod synth;

pub use error::{Error, Result};
