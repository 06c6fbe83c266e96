use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("estimate_clean is singular at t={t}: alpha[t] = 0")]
    Singularity { t: usize },

    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),

    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("loss mode `{mode}` requires the `{component}` component")]
    MissingComponent {
        mode: &'static str,
        component: &'static str,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("subject sets are not disjoint; shared ids: {0:?}")]
    Disjointness(Vec<String>),

    #[error("failed to load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Shape(_)
                | Error::Range(_)
                | Error::UnknownToken(_)
                | Error::InsufficientBatch(_)
                | Error::InsufficientPairs(_)
                | Error::InsufficientData(_)
                | Error::MissingComponent { .. }
                | Error::Disjointness(_)
                | Error::Load { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
