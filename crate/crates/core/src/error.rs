use thiserror::Error;

/// Crate-wide error type.
///
/// Variants split into validation failures (bad inputs, malformed files,
/// infeasible requests) and numerical failures (solver breakdown,
/// non-convergence). [`Error::exit_code`] encodes that split for the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("motion profile infeasible: {0}")]
    InfeasibleProfile(String),

    #[error("time index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("denominator vanishes at z = 1, dc gain undefined")]
    PoleAtDc,

    #[error("invalid plant: {0}")]
    InvalidPlant(String),

    #[error("plant output solve did not converge: {0}")]
    NoConvergence(String),

    #[error("algebraic loop: the feedback controller must be strictly proper")]
    AlgebraicLoop,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("optimizer did not converge: {0}")]
    NotConverged(String),

    #[error("damped linear solve failed: {0}")]
    LinearSolveFailure(String),

    #[error("normal matrix is numerically singular (condition {0:.3e})")]
    SingularNormalMatrix(f64),

    #[error("instrument cross matrix is numerically singular (condition {0:.3e})")]
    SingularCrossMatrix(f64),

    #[error("no usable results: {0}")]
    EmptyResults(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {msg}")]
    MalformedFile { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to: 1 for validation
    /// problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoConvergence(_)
            | Error::NotConverged(_)
            | Error::LinearSolveFailure(_)
            | Error::SingularNormalMatrix(_)
            | Error::SingularCrossMatrix(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
