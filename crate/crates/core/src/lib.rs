//! Partition-based quantile and ridge regression for forecasting milestone
//! completion times and other attributed time-series targets.
//!
//! A partitioner (CART tree, k-means over categorical indicators, or a k-d
//! tree neighborhood) splits the encoded feature space; each partition holds
//! its own linear quantile or ridge estimator. Baseline ensembles, the
//! preprocessing pipeline and a cross-validated benchmarking harness sit
//! alongside.

pub mod baselines;
pub mod composite;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod linear;
pub mod partition;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
