use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cholesky failed for every jitter in {ladder:?}")]
    Cholesky { ladder: Vec<f64> },

    #[error("non-positive diagonal entry {value} at index {index}")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid cavity (site {index:?}): variance {variance}")]
    Cavity { index: Option<usize>, variance: f64 },

    #[error("invalid site update at {index}: {reason}")]
    Site { index: usize, reason: String },

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("incomplete grid, missing {} cell(s): {}", .0.len(), .0.join("; "))]
    IncompleteGrid(Vec<String>),

    #[error("evaluation failed at parameters {params:?}: {source}")]
    AtParams {
        params: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
