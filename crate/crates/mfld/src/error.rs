//! Error type shared across the solver.
//!
//! Numerical aborts carry the location at which the first non-finite value
//! appeared (outer path, time node, particle, algorithmic time) so a failed
//! run can be replayed up to the offending step.

use thiserror::Error;

/// Unified error type for construction, simulation and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Array dimensions disagree with each other or with the problem.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A NaN or infinity appeared during simulation; the payload names the
    /// array and indices, e.g. `theta[j=3,k=5,i=17] at s=0.124`.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The operation is not defined for the given problem family.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// I/O failure with the path it occurred on.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file being read back does not match the expected layout.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    /// An [`Error::Io`] tagged with the path (or a short label for an
    /// in-memory sink) the operation was writing.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
