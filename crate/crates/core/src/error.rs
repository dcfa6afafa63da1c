use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("not enough points: need at least {needed}, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("cloud has zero variance")]
    ZeroVariance,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("id `{0}` present on one side of the join only")]
    UnmatchedId(String),
    #[error("unsupported polynomial degree {0}; expected 1, 2 or 3")]
    UnsupportedDegree(u32),
    #[error("basis of {p} monomials exceeds the allocation cap of {cap}")]
    BasisTooLarge { p: u128, cap: u128 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("basis mismatch between coefficient vectors")]
    BasisMismatch,
    #[error("coefficient vector is zero")]
    ZeroCoefficients,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("all sample points were excluded by the gradient floor")]
    AllExcluded,
    #[error("covariance could not be regularized to positive definite")]
    NotPositiveDefinite,
    #[error("insufficient contexts: need {needed}, have {available}")]
    InsufficientContexts { needed: usize, available: usize },
    #[error("missing (label, context) cell: label {label}, context {context:?}")]
    MissingCell { label: usize, context: [usize; 3] },
    #[error("test record {0} reached a train-side computation")]
    Leakage(String),
    #[error("classifier needs at least two classes")]
    SingleClass,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
