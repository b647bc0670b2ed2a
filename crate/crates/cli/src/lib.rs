//! Pipeline behind the `crisp` binary: dataset generation, training,
//! uncertainty estimation, evaluation and the M ablation.

pub mod commands;
pub mod config;

pub use config::{Method, PredSource, RunConfig};
