use thiserror::Error;

/// Errors raised by the conformer-flow pipeline.
///
/// Variants map onto the CLI exit codes: validation and structural problems
/// exit with 2, numerical failures with 3, solver non-convergence with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Structural(_)
            | Error::Contract(_)
            | Error::Parse { .. }
            | Error::Io(_) => 2,
            Error::DegenerateGeometry(_) | Error::Numerical(_) => 3,
            Error::NonConvergence(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
