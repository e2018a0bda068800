use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular path geometry: |1 - ye*k| = {0:e}")]
    SingularGeometry(f64),
    #[error("degenerate scheduling vector: {0}")]
    DegenerateScheduling(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),
    #[error("QP is infeasible")]
    Infeasible,
    #[error("training diverged at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("targets have zero variance")]
    DegenerateTargets,
    #[error("run log is empty")]
    EmptyLog,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
