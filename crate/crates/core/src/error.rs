use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
