use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("history index {index} exceeds the grid horizon K = {horizon}")]
    GridBounds { index: usize, horizon: usize },

    #[error("argument {value} outside the domain (must exceed {lower})")]
    Domain { value: f64, lower: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("law cannot produce exact joint probabilities")]
    UnsupportedLaw,

    #[error("instance too large: {cells} cells exceed the guard of {guard}")]
    InstanceTooLarge { cells: u128, guard: u128 },

    #[error("undefined cell: {0}")]
    UndefinedCell(String),

    #[error("histories exhausted at visit {visit} before the event time settled")]
    InsufficientHistory { visit: usize },

    #[error("empty cohort")]
    EmptyCohort,

    #[error("structural zero: {0}")]
    StructuralZero(String),

    #[error("non-identifiable configuration: {0}")]
    NonIdentifiable(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("fit diverged: {0}")]
    Divergence(String),

    #[error("no convergence: {message}")]
    Convergence { message: String, best: Vec<f64> },

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("no sign change of the estimating function inside the search box")]
    Bracket,

    #[error("weak identification: derivative of the estimating function is {0:e}")]
    WeakIdentification(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for malformed input files, as opposed to domain failures.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Json(_) | Error::Csv(_))
    }
}
