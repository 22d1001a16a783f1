//! Graph-S4: a graph state-space sequence model for networked multivariate
//! time series, with self-supervised masked-network prediction, anomaly
//! screening and supervised fine-tuning.

pub mod dataio;
pub mod error;
pub mod evalx;
pub mod graph_mixing;
pub mod model;
pub mod ssm_core;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
