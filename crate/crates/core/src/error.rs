use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input row; `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("linkage error: {0}")]
    Linkage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Failure inside one job of an experiment, annotated with where it happened.
    #[error("{context}: {source}")]
    Job {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_job(self, context: impl Into<String>) -> Self {
        Error::Job {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (files, config) rather than
    /// by a computation failing.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Validation(_)
            | Error::Linkage(_)
            | Error::Config(_)
            | Error::Input(_)
            | Error::Checkpoint(_) => true,
            Error::Job { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
