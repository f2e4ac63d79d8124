use thiserror::Error;

/// Errors raised across the abstraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("NaN coordinate at index {0}")]
    NanCoordinate(usize),

    #[error("noise gain produces correlated components (|cov[{row},{col}]| = {value:e}); closed-form rows need axis-aligned noise")]
    CorrelatedNoise { row: usize, col: usize, value: f64 },

    #[error(
        "transition storage of {states} states x {inputs} inputs x {internals} internal inputs needs ~{needed_bytes} bytes, over the budget of {budget_bytes} bytes"
    )]
    MemoryBudget {
        states: usize,
        inputs: usize,
        internals: usize,
        needed_bytes: u64,
        budget_bytes: u64,
    },

    #[error("supply-rate blocks are inconsistent: {0}")]
    InconsistentSupply(String),

    #[error("combinatorial guard: {tuples} tuples exceed the limit of {limit}; use construction mode")]
    TooManyTuples { tuples: u128, limit: u128 },

    #[error("bound evaluation: {0}")]
    Bound(String),

    #[error("infeasible confidence target {target}: bound at the largest epsilon {epsilon} is {bound}")]
    InfeasibleTarget {
        target: f64,
        epsilon: f64,
        bound: f64,
    },

    #[error("empty safe set")]
    EmptySafeSet,

    #[error("time index {k} is beyond the policy horizon {horizon}")]
    BeyondHorizon { k: usize, horizon: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing upstream artifact {0}; run the producing stage first")]
    MissingArtifact(String),

    #[error("malformed MDP dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            context: context.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
