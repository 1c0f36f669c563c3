use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("outcome out of range: y = {value} at line {line} (binary outcome must be 0 or 1)")]
    OutcomeOutOfRange { line: usize, value: f64 },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid cell: hospital {hospital}, surgeon {surgeon}")]
    InvalidCell { hospital: usize, surgeon: usize },
    #[error("cell (hospital {hospital}, surgeon {surgeon}) has no observations")]
    EmptyCell { hospital: usize, surgeon: usize },
    #[error("complete separation in {model}: parameter `{parameter}` diverged (|value| > 30)")]
    Separation { model: String, parameter: String },
    #[error("{model} did not converge after {iterations} iterations")]
    NonConvergence { model: String, iterations: usize },
    #[error("hierarchy mismatch: {0}")]
    HierarchyMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("too many failed replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    /// True for errors caused by optimisation trouble rather than bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Separation { .. } | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
