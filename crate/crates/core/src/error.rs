use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto stable exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("label error in {context}: {message}")]
    Label { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("catalog mismatch: {0}")]
    CatalogMismatch(String),

    #[error("non-finite value at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the CLI: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Checkpoint(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Label { .. }
            | Error::CatalogMismatch(_)
            | Error::Shape(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }

    /// Short machine-parseable tag used on the last stderr line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Label { .. } => "label",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::CatalogMismatch(_) => "catalog",
            Error::Divergence { .. } => "divergence",
            Error::Invalid(_) => "invalid",
        }
    }
}
