use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("instance {id} has no label")]
    MissingLabel { id: String },

    #[error("instance {id} has no oracle score")]
    MissingOracleScore { id: String },

    #[error("stratum {stratum:?} exhausted: requested {requested}, available {available}")]
    StratumExhausted {
        stratum: String,
        requested: usize,
        available: usize,
    },

    #[error("oracle failed for {} instance(s); first: {}: {}", .failures.len(), .failures[0].0, .failures[0].1)]
    OracleFailures { failures: Vec<(String, String)> },

    #[error("no cached oracle score for instance {0}")]
    CacheMiss(String),

    #[error("template placeholder {{{0}}} has no value")]
    MissingPlaceholder(String),

    #[error("could not parse score from response: {0}")]
    UnparseableScore(String),

    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
