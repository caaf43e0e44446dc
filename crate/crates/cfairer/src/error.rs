use thiserror::Error;

/// Errors shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("k-core filtering removed every record (k={k})")]
    EmptyCore { k: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("graph is not heterogeneous: |K|+|J| = {0} (must exceed 2)")]
    Heterogeneity(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("empty candidate set for state")]
    EmptyCandidates,

    #[error("logging propensity must be positive, got {0}")]
    Propensity(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
