use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or inconsistent caller input.
    #[error("invalid input: {0}")]
    Input(String),

    /// A state object violates its invariants (e.g. a non-positive site variance).
    #[error("invalid state: {0}")]
    State(String),

    /// Cholesky or another factorization failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Removing site `index` from the posterior left a non-positive variance.
    #[error("non-positive cavity variance at index {index} ({variance:e})")]
    NegativeCavity { index: usize, variance: f64 },

    /// EP could not produce a usable approximation.
    #[error("EP fit failed: {0}")]
    EpFailed(String),

    /// The requested criterion is not defined for this label set.
    #[error("criterion undefined: {0}")]
    UndefinedCriterion(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
