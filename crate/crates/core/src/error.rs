use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the forward model, the solvers and the reduced-order machinery.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("iterative solver stopped after {iterations} iterations with relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("factorization failed: zero pivot at row {row}")]
    Singular { row: usize },

    #[error("solution violates the residual contract: relative residual {residual:e} > tol {tol:e}")]
    Residual { residual: f64, tol: f64 },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("solve failed at sample point {point}, frequency index {freq}: {source}")]
    AtSample {
        point: usize,
        freq: usize,
        source: Box<Error>,
    },

    #[error("reduced operator is singular at omega = {omega}")]
    ReducedSingular { omega: f64 },

    #[error("objective is not finite at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("solve count for {what}: expected {expected}, ledger shows {found}")]
    LedgerMismatch { what: String, expected: u64, found: u64 },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = core::result::Result<T, Error>;
