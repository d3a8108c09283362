use thiserror::Error;

/// Error type shared across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{quantity} out of validated range: {value}")]
    OutOfRange { quantity: &'static str, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("assembly failure in cell {cell}: {detail}")]
    Assembly { cell: usize, detail: String },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    #[error("preconditioner stage `{stage}` failed: {source}")]
    PrecondStage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("nonlinear solver did not converge: {0}")]
    Nonconvergence(String),

    #[error("time loop aborted: {0}")]
    TimeLoopAbort(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
