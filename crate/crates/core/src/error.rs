//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index out of range: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("{op}: non-finite values in output")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Missing(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("label of length {label_len} needs at least {min_frames} frames, got {frames}")]
    CtcInfeasible {
        label_len: usize,
        min_frames: usize,
        frames: usize,
    },

    #[error("NaN gradient for parameter '{0}'")]
    NanGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config mismatch with checkpoint: {0:?}")]
    ConfigDiff(Vec<String>),

    #[error("training diverged at step {step} (last good checkpoint: {last:?})")]
    Diverged { step: u64, last: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
