use thiserror::Error;

use crate::model::CostLedger;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("malformed ranking: {0}")]
    MalformedRanking(String),

    /// Network-level failure; the HTTP backend retries these before surfacing them.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// The backend answered but the payload could not be understood. Never retried.
    #[error("malformed backend response: {0}")]
    Parse(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("missing gold difficulty for question {0}")]
    MissingGold(String),

    #[error("question {0} received no difficulty rank in any round")]
    Unranked(String),

    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed; carries whatever cost had been charged so far.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
        partial_ledger: Box<CostLedger>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
