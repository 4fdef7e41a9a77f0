//! Error taxonomy shared by every module.
//!
//! The variants map onto the CLI exit codes: configuration problems exit
//! with 2, solver failures with 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FocalError {
    /// A caller violated an interface contract (wrong dimension, bad order, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Numerical data became unusable (NaN/Inf samples, domain violations).
    #[error("data error: {0}")]
    Data(String),

    /// An experiment configuration could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A solver run failed (divergence, non-convergence of a reference).
    #[error("run error: {0}")]
    Run(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FocalError>;
