use std::path::PathBuf;

use thiserror::Error;

use crate::qp::QpStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid stencil: {0}")]
    InvalidStencil(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("dof {dof} out of range for {n} degrees of freedom")]
    Index { dof: usize, n: usize },

    #[error("integration blew up at step {step}")]
    BlowUp { step: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular normal equations at dof {dof}")]
    SingularSystem { dof: usize },

    #[error("solver failure at dof {dof}: {status:?} ({detail})")]
    Solver {
        dof: usize,
        status: QpStatus,
        detail: String,
    },

    #[error("quadratic program: {0}")]
    Qp(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("eigenvalue iteration failed to converge: {0}")]
    Spectral(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
