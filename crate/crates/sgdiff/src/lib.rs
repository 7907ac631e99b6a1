//! IO, configuration, and experiment-orchestration layer over
//! `sgdiff-core`: datasets on disk, PNG codecs, checkpoints, training
//! runs, sampling, evaluation, the ablation grid, and the gradient
//! battery behind the CLI.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod pipeline;
pub mod png;
pub mod sampling;
pub mod train;

pub use error::{AppError, Result};
