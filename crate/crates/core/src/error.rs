use std::path::PathBuf;

use fasgen_neural::NeuralError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Data { row: usize, message: String },
    #[error("duplicate recording for event `{event}` and station `{station}` (row {row})")]
    Duplicate {
        event: String,
        station: String,
        row: usize,
    },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("covariance is ill-conditioned after jitter escalation (min eigenvalue estimate {min_eigenvalue:.3e})")]
    IllConditioned { min_eigenvalue: f64 },
    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    /// The message already includes the I/O error text.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Schema(_)
            | Error::Data { .. }
            | Error::Duplicate { .. }
            | Error::Geometry(_)
            | Error::InsufficientPairs(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
            Error::IllConditioned { .. } | Error::Training(_) | Error::Neural(_) => 3,
        }
    }
}
