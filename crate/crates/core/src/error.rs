use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("degenerate column: max equals min, cannot discretize")]
    DegenerateColumn,

    #[error("empty stratum: variable {var} level {level} has no eligible units")]
    EmptyStratum { var: usize, level: usize },

    #[error("raking did not converge after {iters} cycles (max relative margin error {residual:e})")]
    RakingDiverged { iters: usize, residual: f64 },

    #[error("empty margin level: variable {var} level {level}")]
    EmptyMarginLevel { var: usize, level: usize },

    #[error("non-finite log density at initialization after {0} attempts")]
    BadInit(usize),

    #[error("parameter constraint violated: {0}")]
    ConstraintViolation(String),

    #[error("empty cell subset in aggregation")]
    EmptySubset,

    #[error("tail too short for GPD fit: {0} exceedances (need >= 5)")]
    TailTooShort(usize),

    #[error("nonpositive weight at index {0}")]
    NonpositiveWeight(usize),

    #[error("zero variance in correlation input")]
    ZeroVariance,

    #[error("interval bounds inverted: lower {lower} > upper {upper}")]
    InvertedInterval { lower: f64, upper: f64 },

    #[error("leave-one-out refit failed for fold {fold}: {source}")]
    LooRefit {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cell references level {level} outside model range for variable {var}")]
    LevelOutOfRange { var: usize, level: usize },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
