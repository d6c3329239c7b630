//! Multi-horizon lifetime-value modeling.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic conversion-funnel
//! dataset, masked-autoencoder pretraining on meta-path graphs, a multi-domain
//! backbone with zero-inflated lognormal heads, and Pareto co-training of the
//! 3/7/30-day value tasks, plus the evaluation metrics and experiment drivers.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod graph;
pub mod horizon;
pub mod io_util;
pub mod metrics;
pub mod model;
pub mod pareto;
pub mod pipeline;
pub mod rng;
pub mod ziln;

pub use error::{Error, Result};
