use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("dataset component `{component}` missing at {path}")]
    MissingComponent { component: String, path: PathBuf },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage {stage} requires checkpoints for stage(s) {missing:?}")]
    Prerequisite { stage: u8, missing: Vec<u8> },

    #[error("non-finite value in `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Configuration/validation errors map to exit code 1, runtime aborts to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::InvalidArgument(_)
            | Error::Format { .. }
            | Error::MissingComponent { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Prerequisite { .. } => 1,
            Error::Io { .. }
            | Error::NonFinite { .. }
            | Error::Metric(_)
            | Error::Tensor(_) => 2,
        }
    }
}
