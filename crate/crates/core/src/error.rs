use thiserror::Error;

use crate::env::Role;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid value for `{field}`: {message}")]
    ConfigField { field: String, message: String },
    #[error("role {0} is not part of this team")]
    UnknownRole(Role),
    #[error("episode has already terminated")]
    TerminalState,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("legal action set is empty")]
    EmptyLegalSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("distributions have different supports")]
    SupportMismatch,
    #[error("KL divergence undefined: q assigns zero mass where p does not")]
    KlUndefined,
    #[error("trajectory is not terminal")]
    NonTerminalTrace,
    #[error("breakdown does not belong to this trajectory: {0}")]
    TraceMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("missing baseline for transition {0}")]
    MissingBaseline(usize),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("self-critique for {role} embeds private memory field `{field}`")]
    CritiqueLeak { role: Role, field: String },
    #[error("buffer holds {available} entries of the requested class, need {needed}")]
    InsufficientEntries { needed: usize, available: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigField {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::ConfigField { .. } | Error::UnknownRole(_) => {
                ErrorCategory::Config
            }
            Error::Io(_) => ErrorCategory::Io,
            Error::NonFiniteGradient(_)
            | Error::KlUndefined
            | Error::DimensionMismatch { .. }
            | Error::SupportMismatch => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}
