use thiserror::Error;

use crate::container::ArchiveError;

pub type Result<T, E = HihaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HihaError {
    #[error("shape mismatch on {axis} axis: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        axis: &'static str,
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("{axis} extent must be at least 1")]
    ZeroExtent { axis: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("malformed sparse structure: {0}")]
    MalformedSparse(String),

    #[error("empty frame series")]
    EmptySeries,

    #[error("broken temporal chain at frame {frame}: {reason}")]
    BrokenChain { frame: usize, reason: String },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HihaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HihaError::InvalidParameter(msg.into())
    }
}

/// Names the first axis on which two shapes disagree.
pub(crate) fn check_shape(expected: [usize; 3], found: [usize; 3]) -> Result<()> {
    const AXES: [&str; 3] = ["level", "lat", "lon"];
    for (i, axis) in AXES.iter().enumerate() {
        if expected[i] != found[i] {
            return Err(HihaError::ShapeMismatch {
                axis,
                expected,
                found,
            });
        }
    }
    Ok(())
}
