use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid rank {rank}: must be less than {limit}")]
    InvalidRank { rank: usize, limit: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("collinearity in {what}: condition number {condition:.3e}")]
    Collinear { what: String, condition: f64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
