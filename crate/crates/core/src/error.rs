use std::path::PathBuf;

/// Errors raised across the distillation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid degradation spec: {0}")]
    Spec(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("distance error: {0}")]
    Distance(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 1 usage/config, 2 data, 3 training/eval.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Spec(_) => 1,
            Error::Io { .. } | Error::Image { .. } | Error::Data(_) | Error::Checkpoint(_) => 2,
            _ => 3,
        }
    }
}
