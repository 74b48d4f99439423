use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the cohort library.
#[derive(Debug, Error)]
pub enum TccError {
    /// Invalid configuration, flags or shapes supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A class index outside `[0, K)`.
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: u32, num_classes: usize },

    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: &'static str },

    #[error("mIoU is undefined: every class has an empty union")]
    UndefinedMiou,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot: {0}")]
    Plot(String),
}

impl TccError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TccError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Validation errors map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TccError::Config(_) | TccError::Shape { .. } | TccError::ClassOutOfRange { .. }
        )
    }
}

pub type Result<T, E = TccError> = std::result::Result<T, E>;
