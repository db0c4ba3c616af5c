use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid delivery grid: {0}")]
    InvalidGrid(String),

    #[error("index out of range: {0}")]
    InvalidIndex(String),

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("chain is not unichain: {0}")]
    NotUnichain(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("discount factor {0} outside (0, 1)")]
    InvalidDiscount(f64),

    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("finite-difference probe at coordinate {coord} failed: {source}")]
    Probe {
        coord: usize,
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

pub type Result<T> = std::result::Result<T, Error>;
