//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by estimation, solving, simulation, and I/O routines.
#[derive(Debug, Error)]
pub enum SptError {
    /// A bandwidth was outside the range supported by the operand shapes.
    #[error("bandwidth {d} out of range: valid values are 0..={max}")]
    BandwidthOutOfRange { d: usize, max: usize },

    /// Operand shapes are inconsistent with each other or with the model.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// The shifted trace used as a normalizer vanished, so the separable
    /// factors are not identified at this bandwidth.
    #[error("degenerate shifted trace at bandwidth {d}: |trace| = {value:.3e} below threshold")]
    DegenerateTrace { d: usize, value: f64 },

    /// A dense fourth-order tensor was requested above the configured cap.
    #[error("dense tensor with {points} grid points exceeds the oracle cap of {cap}")]
    OracleCapExceeded { points: usize, cap: usize },

    /// A linear system was singular to working precision.
    #[error("singular system: {context}")]
    SingularSystem { context: String },

    /// An iterative solver exhausted its iteration budget.
    #[error("no convergence after {iters} iterations (residual {residual:.3e}, tol {tol:.3e})")]
    NonConvergence {
        iters: usize,
        residual: f64,
        tol: f64,
    },

    /// More eigenpairs were requested than are numerically available.
    #[error("requested {requested} eigenpairs but only {available} are nonzero")]
    RankExceeded { requested: usize, available: usize },

    /// A non-finite value (NaN or infinity) was found where finite data is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A binary stack file was malformed.
    #[error("malformed stack file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Text input (CSV, JSON) could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

impl SptError {
    /// Process exit code for the CLI: 1 for user errors, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SptError::DegenerateTrace { .. }
            | SptError::SingularSystem { .. }
            | SptError::NonConvergence { .. }
            | SptError::RankExceeded { .. }
            | SptError::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SptError>;
