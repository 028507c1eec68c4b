//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by the tracking engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a model) disagree on dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A spectrum that must represent a real map is not conjugate-symmetric.
    #[error("spectrum is not conjugate-symmetric (max imaginary residue {residue:.3e})")]
    NotConjugateSymmetric { residue: f64 },

    /// Division by a zero spectrum bin with no regularization to rescue it.
    #[error("singular system: {0}")]
    Singular(String),

    /// A numeric quantity became non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The iterative solver produced a non-finite residual.
    #[error("solver diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    /// An operation that needs stored samples was called on an empty memory.
    #[error("sample memory is empty")]
    EmptyMemory,

    /// The innovation covariance of the Kalman update is not invertible.
    #[error("kalman innovation covariance is singular; widen the measurement noise")]
    Conditioning,

    /// A feature file failed validation.
    #[error("feature file error: {0}")]
    FeatureFile(String),

    /// Underlying I/O failure while reading or writing a feature file.
    #[error("feature file i/o: {0}")]
    Io(#[from] std::io::Error),

    /// A candidate search region lies entirely outside the frame.
    #[error("search region outside frame bounds: {0}")]
    OutOfFrame(String),

    /// Invalid tracker input (degenerate box, empty sequence).
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;
