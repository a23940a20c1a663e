use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed xml at byte {offset}: {message}")]
    Xml { offset: u64, message: String },

    #[error("annotation schema error: {0}")]
    Schema(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("internal failure: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Xml { .. } => "xml",
            Error::Schema(_) => "schema",
            Error::Decode { .. } => "decode",
            Error::UnknownCategory(_) => "unknown_category",
            Error::UnknownImage(_) => "unknown_image",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Internal(_) => "internal",
        }
    }

    /// Internal failures map to exit code 2, everything else to 1.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}
