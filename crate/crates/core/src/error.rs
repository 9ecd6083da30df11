use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate sampling range for `{field}` while heterogeneity is required")]
    DegenerateRange { field: String },

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: String, found: String },

    #[error("non-uniform sample spacing at row {row}")]
    NonUniformSpacing { row: usize },

    #[error("normalized value {value} out of [-1, 1] at row {row}")]
    OutOfRange { row: usize, value: f64 },

    #[error("baseline power is not trackable (fails at {failed_at_s} s)")]
    BaselineUntrackable { failed_at_s: f64 },

    #[error("offset search did not terminate after {0} doublings")]
    UnboundedSearch(usize),

    #[error("enumeration oracle refused: {0} devices exceeds the limit of 20")]
    OracleTooLarge(usize),

    #[error("ensemble violation times unattainable by first-order VB")]
    NoFeasibleFit,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
