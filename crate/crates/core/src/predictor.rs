use crate::data::{DataError, InputMatrix};

/// Anything that maps a raw input trajectory to NOx predictions at each
/// window end. The ABC sampler only sees models through this trait.
pub trait NoxPredictor: Sync {
    /// Window length in samples.
    fn window(&self) -> usize;

    /// Number of raw input channels expected per sample.
    fn channels(&self) -> usize;

    /// Predictions for a T×d physical input matrix, one per window end
    /// (length `T - W + 1`).
    fn predict_trajectory(&self, inputs: &InputMatrix) -> Result<Vec<f64>, DataError>;
}

pub(crate) fn check_trajectory(p: &dyn NoxPredictor, inputs: &InputMatrix) -> Result<(), DataError> {
    if inputs.cols() != p.channels() {
        return Err(DataError::DimensionMismatch {
            expected: p.channels(),
            actual: inputs.cols(),
        });
    }
    if inputs.rows() < p.window() {
        return Err(DataError::WindowTooLong(p.window() as f64));
    }
    Ok(())
}
