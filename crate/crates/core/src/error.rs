//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the alignment library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data violates a structural invariant (missing descriptor,
    /// duplicate class, ragged row, ...).
    #[error("data integrity: {0}")]
    Data(String),

    /// A parse failure in an input file, with its 1-based line number.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A row with (near-)zero norm reached a normalization step, which
    /// signals a collapsed latent code.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// Batch sampling could not satisfy the requested shape.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Training produced a non-finite loss or gradient.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Evaluation was asked to score an empty test partition.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Sampling(_)
            | Error::Evaluation(_) => 3,
            Error::Dimension(_)
            | Error::Precondition(_)
            | Error::DegenerateVector(_)
            | Error::Divergence { .. } => 4,
            Error::Io(_) | Error::Serde(_) => 5,
        }
    }

    /// Single-word machine-parsable category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Format { .. } | Error::Sampling(_) | Error::Evaluation(_) => {
                "data"
            }
            Error::Dimension(_)
            | Error::Precondition(_)
            | Error::DegenerateVector(_)
            | Error::Divergence { .. } => "numeric",
            Error::Io(_) | Error::Serde(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
