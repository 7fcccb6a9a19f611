use thiserror::Error;

/// Errors raised by the ensemble control library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("member {member} diverged at t = {time}")]
    Divergence { member: usize, time: f64 },

    #[error("divergence during iteration {iter}: member {member} at t = {time}")]
    IterationDivergence { iter: usize, member: usize, time: f64 },

    #[error("capability missing: {0}")]
    Capability(String),

    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Attach an optimizer iteration to a divergence error.
    pub(crate) fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::Divergence { member, time } => Error::IterationDivergence { iter, member, time },
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::IterationDivergence { .. })
    }
}
