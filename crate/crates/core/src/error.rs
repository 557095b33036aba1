use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SlimError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants fall into three families that the CLI maps onto exit codes:
/// input/config/format problems, numerical failures (`Singular`,
/// `Convergence`) and I/O.
#[derive(Debug, Error)]
pub enum SlimError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("no convergence after {sweeps} sweeps (off-diagonal ratio {residual:.3e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("budget infeasible: minimum cost {required} exceeds budget {budget} by {shortfall}")]
    Budget { budget: u64, required: u64, shortfall: u64 },

    #[error("instance too large for exhaustive search: {candidates} candidates exceeds {limit}")]
    TooLarge { candidates: u128, limit: u128 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("provenance mismatch: stats were collected on model {found:016x}, expected {expected:016x}")]
    Provenance { expected: u64, found: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SlimError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SlimError::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        SlimError::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SlimError::Config(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        SlimError::CorruptHeader(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlimError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics themselves rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SlimError::Singular(_) | SlimError::Convergence { .. } | SlimError::NonFinite(_)
        )
    }
}
