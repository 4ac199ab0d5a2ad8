//! The spectrum classifier: layer definitions, the lite architecture
//! builder, TIC normalization and checkpoints.

mod builder;
mod checkpoint;
mod network;
mod spectrum;

pub use builder::{build_isotopenet_lite, isotopenet_lite_arch, ENVELOPE_SPAN_DA, MIN_INPUT_LEN};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use network::{argmax, softmax, ActShape, Architecture, LayerSpec, ModelParams};
pub use spectrum::{tic_normalize, Spectrum};

use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has length {got}, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("cannot TIC-normalize a spectrum with total ion count {0}")]
    ZeroTic(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
