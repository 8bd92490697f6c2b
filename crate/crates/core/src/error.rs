use std::path::PathBuf;

use thiserror::Error;



#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("site {index} at ({x}, {y}) lies outside the mesh")]
    OutOfDomain { index: usize, x: f64, y: f64 },

    #[error("mesh refinement failed: {0}")]
    Refinement(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not positive definite (pivot {pivot})")]
    Indefinite { pivot: usize },

    #[error("non-finite value while evaluating block {block}")]
    NumericalOverflow { block: crate::model::Block },

    #[error("newton iteration did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("sweep {sweep}: {source}")]
    Sweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DegenerateDomain(_) => "degenerate-domain",
            Error::OutOfDomain { .. } => "out-of-domain",
            Error::Refinement(_) => "mesh-refinement",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::Indefinite { .. } => "indefinite-matrix",
            Error::NumericalOverflow { .. } => "numerical-overflow",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Sweep { source, .. } => source.category(),
            Error::InsufficientData(_) => "insufficient-data",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
