//! Gaussian-process NOx surrogate.
//!
//! [`ExactGp`] is the plain regression engine over normalized rows;
//! [`GpModel`] wraps it with per-channel transforms and windowing so callers
//! work in physical units.

mod adam;
mod exact;
mod kernel;
mod model;

pub use adam::{Adam, AdamConfig};
pub use exact::{subsample_indices, ExactGp, Prediction, TrainConfig, JITTER_LADDER};
pub use kernel::{kernel, kernel_sym, RbfHyperparams};
pub use model::{ChannelTransform, GpConfig, GpModel, ModelArtifact, MODEL_FORMAT, MODEL_FORMAT_VERSION};

use thiserror::Error;

use crate::data::DataError;
use crate::transform::TransformError;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("kernel matrix not positive definite after the largest jitter")]
    FactorizationFailed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model artifact: {0}")]
    BadArtifact(String),
    #[error("reloaded factorization off by {0:e} relative Frobenius")]
    Reconstruction(f64),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
