use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument {value} outside [-1, 1]")]
    Domain { value: f64 },

    #[error("invalid spherical harmonic index: {0}")]
    InvalidIndex(String),

    #[error("invalid moment order {0}; expected at least 1")]
    InvalidOrder(usize),

    #[error("quadrature not exact for degree {needed} (built for degree {available})")]
    QuadratureInsufficient { needed: usize, available: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("non-finite value in cell ({i}, {j}), component {component}")]
    NonFinite { i: usize, j: usize, component: usize },

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
