use std::io;

use thiserror::Error;

use crate::engine::EngineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("tap index {index} outside 1..={tap_count}")]
    TapOutOfRange { index: usize, tap_count: usize },
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("ensemble has no sub-models")]
    EmptyEnsemble,
    #[error("sub-models disagree: {0}")]
    IncompatibleModels(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("no samples classified correctly by every sub-model (checked {checked})")]
    NoCommonlyCorrect { checked: usize },
    #[error("training diverged at epoch {epoch} (sub-model {model})")]
    Diverged { epoch: usize, model: usize },
    #[error("idx: {message} at byte offset {offset}")]
    Idx { offset: usize, message: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field,
            reason: reason.into(),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Engine(_) => "engine",
            Error::UnknownArchitecture(_) => "unknown_architecture",
            Error::TapOutOfRange { .. } => "tap_out_of_range",
            Error::InputShape { .. } => "input_shape",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::IncompatibleModels(_) => "incompatible_models",
            Error::Empty(_) => "empty",
            Error::InvalidSpec { .. } => "invalid_spec",
            Error::NoCommonlyCorrect { .. } => "no_commonly_correct",
            Error::Diverged { .. } => "diverged",
            Error::Idx { .. } => "idx",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
