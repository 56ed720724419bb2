use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(bdctm::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Stale(_) => 2,
            CliError::Data(_) => 3,
            CliError::Sampler(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<bdctm::Error> for CliError {
    fn from(e: bdctm::Error) -> Self {
        use bdctm::Error as E;
        match e {
            E::Config { .. } => CliError::Config(e.to_string()),
            E::Data { .. } | E::UnknownLevel { .. } | E::Csv(_) => CliError::Data(e.to_string()),
            E::Initialization(_) | E::Convergence { .. } | E::Domain(_) => CliError::Sampler(e.to_string()),
            E::StaleArtifact(m) => CliError::Stale(m),
            other => CliError::Core(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(bdctm::Error::Csv(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(bdctm::Error::Json(e))
    }
}
