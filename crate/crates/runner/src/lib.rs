//! Training, evaluation, ablation and reporting around the core detector.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod train;
pub mod visualize;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Result, RunError};
