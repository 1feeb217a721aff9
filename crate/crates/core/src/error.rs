use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("time step must be non-negative, got {0}")]
    NegativeDt(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate mixing: predicted probability of model {0} vanished")]
    DegenerateMixing(usize),
    #[error("tape must be sealed before the reverse sweep")]
    TapeNotSealed,
    #[error("cluster has no points")]
    EmptyCluster,
    #[error("length mismatch: {left} estimates vs {right} truth states")]
    LengthMismatch { left: usize, right: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    DivergedTraining { epoch: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("parse error on line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: u32 },
    #[error("empty input")]
    EmptyInput,
    #[error("record at step {0} carries no covariance")]
    MissingCovariance(usize),
    #[error("record at step {0} carries no innovation")]
    MissingInnovation(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
