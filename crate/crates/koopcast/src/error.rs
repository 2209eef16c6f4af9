//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A linear system was too close to singular to solve reliably. Carries
    /// the estimated pivot ratio so callers can report how bad it was.
    #[error("ill-conditioned linear system: pivot ratio {ratio:.3e} exceeds {limit:.1e}")]
    IllConditioned { ratio: f64, limit: f64 },

    /// A contract violation in the differentiation engine (e.g. non-scalar
    /// backward root, duplicate parameter leaf).
    #[error("autodiff contract violation: {0}")]
    Contract(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A series is too short or empty for the requested operation.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Numerical integration produced a non-finite state.
    #[error("integration diverged: non-finite state at t = {t}")]
    Integration { t: f64 },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A model fit failed (rank deficiency, non-convergence).
    #[error("fit error: {0}")]
    Fit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
