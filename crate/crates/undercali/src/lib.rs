//! Online adaptation engine for irregular multivariate time series
//! forecasting.
//!
//! A frozen source forecaster is wrapped with three components that adapt at
//! test time: an uncertainty estimator scoring each prediction, a pair of
//! gated residual calibrators (one for reliable predictions, one for
//! unreliable ones), and a routing module that maintains running statistics
//! of the uncertainty scores to decide which expert handles each sample and
//! whether the current batch warrants an update at all.

pub mod arm;
pub mod config;
pub mod diffkit;
pub mod engine;
pub mod error;
pub mod forecaster;
pub mod gdc;
pub mod imts_data;
pub mod mat;
pub mod report;
pub mod selfcheck;
pub mod shiftgen;
pub mod uncertainty;

pub use error::{Error, Result};
pub use mat::Mat;
