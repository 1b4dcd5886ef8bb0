use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate covariance (condition number {condition:.3e})")]
    DegenerateCovariance { condition: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed for {path}: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("initialization produced no points")]
    EmptyInitialization,

    #[error("gaussian cloud is empty")]
    EmptyCloud,

    #[error("invalid render state: {0}")]
    InvalidState(String),

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("non-finite loss at iteration {iteration} (frame {frame}): {diagnostics}")]
    NonFiniteLoss {
        iteration: usize,
        frame: usize,
        diagnostics: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frame index {index} out of range (sequence has {len} frames)")]
    FrameOutOfRange { index: usize, len: usize },
}
