//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between tensors; names both shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid argument (empty input, out-of-range index, non-scalar loss, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Literal attention normalization with |sum of scores| below threshold.
    #[error("degenerate normalization: |sum of attention scores| = {sum_abs:.3e} < {threshold:.1e}")]
    DegenerateNormalization { sum_abs: f64, threshold: f64 },

    /// A function handed to the gradient checker was not deterministic.
    #[error("contract violation: function is not deterministic (consumed RNG or mutated state): {0}")]
    NonDeterministic(String),

    /// Text parse failure with a 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file corruption or truncation.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint produced by an incompatible format version.
    #[error("checkpoint version mismatch: file has version {found}, supported version is {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    /// Non-finite gradient detected before an optimizer step.
    #[error("non-finite gradient in parameter '{param}'; training aborted")]
    NanGradient { param: String },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
