//! Evaluation harness for the mbcf tracker: dataset I/O, OTB and VOT-style
//! metrics, a deterministic synthetic-sequence generator, and the `mbcf`
//! command line interface.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod sequence;
pub mod synth;
pub mod vot;

use thiserror::Error;

/// Harness-level errors, split by exit-code class.
#[derive(Debug, Error)]
pub enum BenchError {
    /// Malformed user input: missing files, unparsable ground truth,
    /// bad configuration values.
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// Failures inside the tracking engine.
    #[error("tracker error: {0}")]
    Tracker(#[from] mbcf_core::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl BenchError {
    /// CLI exit code class: 1 for input problems, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Input(_) | BenchError::Io(_) | BenchError::Image(_) => 1,
            BenchError::Tracker(_) | BenchError::Serialize(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
