use thiserror::Error;

/// Errors raised across the HANOVA library.
#[derive(Debug, Error)]
pub enum HanovaError {
    /// A malformed record in an input file. `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// A dense or exact computation was asked for above its size limit.
    #[error("problem too large: {0}")]
    TooLarge(String),

    /// An iterative computation hit its sweep limit. `partial` is the value
    /// reached so far.
    #[error("did not converge after {sweeps} sweeps (partial value {partial})")]
    NotConverged { partial: f64, sweeps: usize },

    #[error("cannot estimate: {0}")]
    Inestimable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HanovaError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HanovaError::Invalid(msg.into()))
}
