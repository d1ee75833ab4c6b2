use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the toolkit.
///
/// Variants split into two families: input errors (bad arguments, missing
/// files, degenerate corpora) and validation errors (files that parse but
/// violate a schema or a cross-file consistency rule). The CLI maps them to
/// exit codes 1 and 2 respectively.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    #[error("conflicting {what}: {}", items.join(", "))]
    Conflict { what: String, items: Vec<String> },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("regex: {0}")]
    Regex(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors where input parsed but failed validation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. } | Error::Consistency(_) | Error::Conflict { .. } | Error::Json { .. }
        )
    }

    /// Attach a file path to a schema error raised while reading that file.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Schema { context, message } => Error::Schema {
                context: format!("{} ({context})", path.display()),
                message,
            },
            other => other,
        }
    }
}
