use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported wav format in `{chunk}` chunk: {message}")]
    Format { chunk: String, message: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("model binding mismatch: {0}")]
    Binding(String),

    #[error("cannot length-normalize a zero vector")]
    ZeroNorm,

    #[error("utterance has {frames} frames but the network needs at least {required}")]
    ReceptiveField { frames: usize, required: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("archive version error: {0}")]
    Version(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable, machine-parseable class name used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "definiteness",
            Error::Argument(_) => "argument",
            Error::EmptyInput(_) => "empty-input",
            Error::Format { .. } => "format",
            Error::Training(_) => "training",
            Error::Binding(_) => "binding",
            Error::ZeroNorm => "division-guard",
            Error::ReceptiveField { .. } => "receptive-field",
            Error::Metric(_) => "metric",
            Error::Report(_) => "report",
            Error::Config(_) => "config",
            Error::CorruptArchive(_) => "corrupt-archive",
            Error::Version(_) => "version",
            Error::Io { .. } => "io",
        }
    }
}
