//! Error taxonomy for the CLI. Every failure prints as
//! `error[category]: message` and maps to a stable exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Caption(String),
    #[error("{0}")]
    Math(#[from] sgdiff_core::TensorError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl AppError {
    pub fn category(&self) -> &'static str {
        match self {
            AppError::Config(_) => "config",
            AppError::Data(_) => "data",
            AppError::Checkpoint(_) => "checkpoint",
            AppError::Caption(_) => "caption",
            AppError::Math(_) => "math",
            AppError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Checkpoint(_) => 4,
            AppError::Caption(_) => 5,
            AppError::Math(_) => 6,
            AppError::Io(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
