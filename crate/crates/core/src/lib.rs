//! Per-engine sensor-bias calibration of a Gaussian-process NOx surrogate.
//!
//! A GP trained once on a nominal engine predicts engine-out NOx from a
//! window of recent inputs. For a new engine, constant offsets on the
//! measured input channels and on the output are inferred by ABC rejection
//! sampling against a short calibration segment, and the accepted offsets
//! are pushed through the same GP to get a predictive band.

pub mod abc;
pub mod data;
pub mod gp;
pub mod normal;
pub mod predictor;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod transform;

pub use data::{EngineDataset, InputMatrix, Schema, SelectionMatrix};
pub use gp::{GpConfig, GpModel};
pub use predictor::NoxPredictor;
pub use transform::QuantileTransform;

use sha2::{Digest, Sha256};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
