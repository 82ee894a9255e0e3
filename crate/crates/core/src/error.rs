//! Error type shared by every module of the engine.

use std::sync::Arc;

use thiserror::Error;

#[derive(Clone, Debug, Error)]
pub enum MeloError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("pretraining reached accuracy {accuracy:.4} after {epochs} epochs (needs {target})")]
    Pretrain {
        accuracy: f64,
        epochs: usize,
        target: f64,
    },

    #[error("batch {batch} fit accuracy {accuracy:.4}; {} edit(s) not fit: {unfit:?}", unfit.len())]
    EditFailure {
        batch: usize,
        accuracy: f64,
        unfit: Vec<usize>,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("snapshot format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(Arc<std::io::Error>),
}

impl From<std::io::Error> for MeloError {
    fn from(e: std::io::Error) -> Self {
        MeloError::Io(Arc::new(e))
    }
}

pub type Result<T> = std::result::Result<T, MeloError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> MeloError {
    MeloError::Shape {
        op,
        detail: detail.into(),
    }
}
