use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at t = {t}{}", step.map(|s| format!(" (step {s})")).unwrap_or_default())]
    Diverged { step: Option<usize>, t: f64 },

    #[error("objective is unbounded below: {0}")]
    UnboundedObjective(String),

    #[error("unsupported admissible set: {0}")]
    UnsupportedSet(String),

    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
