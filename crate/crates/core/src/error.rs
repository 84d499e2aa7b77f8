use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("at least {required} subjects required, got {got}")]
    TooFewSubjects { required: usize, got: usize },
    #[error("panel must be centered before this operation")]
    NotCentered,
    #[error("index {index} out of range for {len} variables")]
    IndexError { index: usize, len: usize },
    #[error("pair ({0}, {1}) is not a valid off-diagonal pair")]
    InvalidPair(usize, usize),
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
    #[error("degenerate null: second cumulant is zero")]
    DegenerateNull,
    #[error("invalid test statistic {0}")]
    InvalidStatistic(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("no observations for subject {subject}, variable {variable}")]
    NoData { subject: usize, variable: usize },
    #[error("variable {0} has zero variance")]
    DegenerateVariable(usize),
    #[error("pipeline order error: {0}")]
    PipelineOrderError(String),
    #[error("power is undefined when there are no true alternatives")]
    PowerUndefined,
    #[error("matrix is not positive semidefinite (minimum eigenvalue {0:e})")]
    NotPSD(f64),
    #[error("directed graph contains a cycle")]
    NotADAG,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::TooFewSubjects { .. } => "TooFewSubjects",
            Error::NotCentered => "NotCentered",
            Error::IndexError { .. } => "IndexError",
            Error::InvalidPair(..) => "InvalidPair",
            Error::NumericalDegeneracy(_) => "NumericalDegeneracy",
            Error::DegenerateNull => "DegenerateNull",
            Error::InvalidStatistic(_) => "InvalidStatistic",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::InvalidLevel(_) => "InvalidLevel",
            Error::NoData { .. } => "NoData",
            Error::DegenerateVariable(_) => "DegenerateVariable",
            Error::PipelineOrderError(_) => "PipelineOrderError",
            Error::PowerUndefined => "PowerUndefined",
            Error::NotPSD(_) => "NotPSD",
            Error::NotADAG => "NotADAG",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
