use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("csv ingestion failed at row {row}: {message}")]
    Ingest { row: usize, message: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("missing value in always-observed column {column} at row {row}")]
    MissingCovariate { row: usize, column: String },
    #[error("non-numeric cell in column {column} at row {row}: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("insufficient pattern support: {0}")]
    InsufficientSupport(String),
    #[error("separation detected while fitting selection model for variable {variable}")]
    Separation { variable: usize },
    #[error("solver did not converge after {iterations} iterations (residual norm {residual})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular matrix in {0}")]
    SingularMatrix(String),
    #[error("positivity violation: {0}")]
    Positivity(String),
    #[error("rank-deficient design in {0}")]
    RankDeficient(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("enumeration infeasible: {0}")]
    EnumerationTooLarge(String),
    #[error("bootstrap diagnostic failure: {failed} of {total} replicates failed")]
    BootstrapFailure { failed: usize, total: usize },
    #[error("experiment diagnostic failure: {failed} of {total} trials failed")]
    TrialFailure { failed: usize, total: usize },
    #[error("covariate transform requires positive inputs, got ({0}, {1})")]
    NonPositiveCovariate(f64, f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
