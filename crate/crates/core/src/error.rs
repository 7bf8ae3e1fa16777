use std::fmt;

/// Location of a parse failure inside an input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Byte(u64),
    Line(u64),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Byte(b) => write!(f, "byte {b}"),
            Position::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no convergence: {0}")]
    Convergence(String),

    #[error("non-finite state encountered at integration step {step}")]
    Overflow { step: usize },

    #[error("integrator disagreement {disagreement:.3e} exceeds tolerance {tolerance:.1e}")]
    IntegratorAccuracy { disagreement: f64, tolerance: f64 },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("bound violated at x = {point:?}: {detail}")]
    BoundViolation { point: Vec<f64>, detail: String },

    #[error("parse error at {at}: {message}")]
    Parse { at: Position, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn parse_line(line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            at: Position::Line(line),
            message: msg.into(),
        }
    }

    pub(crate) fn parse_byte(byte: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            at: Position::Byte(byte),
            message: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Contract(_) | Error::Precondition(_) => 2,
            Error::Convergence(_)
            | Error::Overflow { .. }
            | Error::IntegratorAccuracy { .. }
            | Error::Divergence { .. } => 3,
            Error::BoundViolation { .. } => 4,
            Error::Parse { .. } | Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
