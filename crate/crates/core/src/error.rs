use thiserror::Error;

use crate::toylm::Token;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prefix of length {len} exceeds the length cap {cap}")]
    LengthCap { len: usize, cap: usize },

    #[error("token {token} is not in the valid-next set of the current matcher state")]
    ConstraintViolation { token: Token },

    #[error("language has {count} strings, above the enumeration limit {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("state graph exceeds capacity of {limit} nodes")]
    Capacity { limit: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("grammar has zero total model mass under this language model")]
    DegenerateGrammar,

    #[error("masked mass Z_p is zero at a reachable prefix")]
    NonDegeneracy,

    #[error("estimator returned all-zero future validity at a reachable state")]
    EstimatorDegeneracy,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("rollout horizon {horizon} is shorter than the {needed} tokens needed to complete")]
    HorizonTooShort { horizon: usize, needed: usize },

    #[error("exact table has no entry for the requested state")]
    Coverage,

    #[error("audit failed: {0}")]
    Audit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
