use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("realization is not minimal: {0}")]
    NotMinimal(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) => 2,
            Error::Solver(_) | Error::Estimation(_) => 4,
            _ => 3,
        }
    }

    /// Prefixes the message with the pipeline stage that failed, keeping
    /// the variant (and so the exit code).
    pub fn in_stage(self, stage: &str) -> Self {
        let tag = |m: String| format!("[{stage}] {m}");
        match self {
            Error::Dimension(m) => Error::Dimension(tag(m)),
            Error::NotMinimal(m) => Error::NotMinimal(tag(m)),
            Error::InvalidInput(m) => Error::InvalidInput(tag(m)),
            Error::InsufficientExcitation(m) => Error::InsufficientExcitation(tag(m)),
            Error::Estimation(m) => Error::Estimation(tag(m)),
            Error::Infeasible(m) => Error::Infeasible(tag(m)),
            Error::Solver(m) => Error::Solver(tag(m)),
            Error::Parse(m) => Error::Parse(tag(m)),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), tag(e.to_string()))),
            Error::Json(e) => Error::Parse(tag(e.to_string())),
            Error::Csv(e) => Error::Parse(tag(e.to_string())),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
