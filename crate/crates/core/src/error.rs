use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown level {level:?} in column {column:?}")]
    UnknownLevel { column: String, level: String },

    #[error("data error in row {row}, column {column:?}: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("no convergence after {iterations} iterations: {message}")]
    Convergence { iterations: usize, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn data(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            row,
            column: column.into(),
            message: message.into(),
        }
    }
}
