//! Physical-scale GP model: per-channel transforms, windowing, training on
//! nominal data, the median predictor and the on-disk artifact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::exact::{ExactGp, Prediction, TrainConfig};
use super::kernel::RbfHyperparams;
use super::{AdamConfig, GpError};
use crate::data::{window_matrix, DataError, EngineDataset, InputMatrix};
use crate::predictor::{check_trajectory, NoxPredictor};
use crate::transform::{default_n_quantiles, QuantileTransform};

pub const MODEL_FORMAT: &str = "xcal-gp-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Largest relative Frobenius error accepted when reloading a model.
const RECONSTRUCTION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub window_s: f64,
    pub ard: bool,
    pub n_max: usize,
    /// Quantile-transform the input channels as well as NOx.
    pub transform_inputs: bool,
    /// Transform resolution; `min(1000, N)` when unset.
    pub n_quantiles: Option<usize>,
    pub optimizer: AdamConfig,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            window_s: 5.0,
            ard: true,
            n_max: 2000,
            transform_inputs: true,
            n_quantiles: None,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelTransform {
    Identity,
    Quantile(QuantileTransform),
}

impl ChannelTransform {
    pub fn forward(&self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Quantile(q) => q.forward(x),
        }
    }

    pub fn inverse(&self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Quantile(q) => q.inverse(z),
        }
    }

    fn fit(values: &[f64], n_q: Option<usize>) -> Result<Self, GpError> {
        let n_q = n_q.unwrap_or_else(|| default_n_quantiles(values.len())).min(values.len());
        Ok(Self::Quantile(QuantileTransform::fit(values, n_q)?))
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    gp: ExactGp,
    ard: bool,
    window: usize,
    channels: Vec<String>,
    sample_rate_hz: f64,
    input_transforms: Vec<ChannelTransform>,
    nox_transform: ChannelTransform,
    config_hash: String,
}

/// Serialized form of a [`GpModel`]. The factorization is not stored; it is
/// recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub format_version: u32,
    pub config_hash: String,
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
    pub window: usize,
    pub ard: bool,
    pub hyper: RbfHyperparams,
    pub jitter: f64,
    pub n_train: usize,
    pub input_width: usize,
    /// Row-major normalized training inputs.
    pub train_inputs: Vec<f64>,
    pub train_targets: Vec<f64>,
    pub input_transforms: Vec<ChannelTransform>,
    pub nox_transform: ChannelTransform,
}

impl GpModel {
    /// Fits transforms and the GP on nominal-engine datasets.
    pub fn fit(datasets: &[EngineDataset], cfg: &GpConfig, seed: u64) -> Result<Self, GpError> {
        let first = datasets
            .first()
            .ok_or_else(|| GpError::InvalidConfig("no training datasets".into()))?;
        let schema = first.schema();
        for ds in datasets {
            if ds.schema().channels != schema.channels {
                return Err(GpError::InvalidConfig(format!(
                    "dataset `{}` has a different channel layout",
                    ds.engine_id
                )));
            }
        }
        let window = first.window_samples(cfg.window_s)?;
        let d = schema.dim();

        let nox_all: Vec<f64> = datasets.iter().flat_map(|ds| ds.nox().iter().copied()).collect();
        let nox_transform = ChannelTransform::fit(&nox_all, cfg.n_quantiles)?;
        let input_transforms = (0..d)
            .map(|j| {
                if cfg.transform_inputs {
                    let col: Vec<f64> = datasets.iter().flat_map(|ds| ds.inputs().column(j)).collect();
                    ChannelTransform::fit(&col, cfg.n_quantiles)
                } else {
                    Ok(ChannelTransform::Identity)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut flat = Vec::new();
        let mut targets = Vec::new();
        for ds in datasets {
            if ds.len() < window {
                return Err(DataError::WindowTooLong(cfg.window_s).into());
            }
            let z = normalize_inputs(&input_transforms, ds.inputs())?;
            flat.extend_from_slice(window_matrix(&z, window)?.as_slice());
            targets.extend(ds.nox()[window - 1..].iter().map(|&y| nox_transform.forward(y)));
        }
        let width = d * window;
        let x = DMatrix::from_row_slice(targets.len(), width, &flat);
        let y = DVector::from_vec(targets);
        let train_cfg = TrainConfig {
            ard: cfg.ard,
            n_max: cfg.n_max,
            optimizer: cfg.optimizer.clone(),
        };
        let gp = ExactGp::train(x, y, &train_cfg, seed)?;
        Ok(Self {
            gp,
            ard: cfg.ard,
            window,
            channels: schema.channels.iter().map(|c| c.name.clone()).collect(),
            sample_rate_hz: schema.sample_rate_hz,
            input_transforms,
            nox_transform,
            config_hash: String::new(),
        })
    }

    /// Assembles a model from an already conditioned GP.
    pub fn from_parts(
        gp: ExactGp,
        window: usize,
        channels: Vec<String>,
        input_transforms: Vec<ChannelTransform>,
        nox_transform: ChannelTransform,
    ) -> Result<Self, GpError> {
        if input_transforms.len() != channels.len() {
            return Err(GpError::DimensionMismatch {
                expected: channels.len(),
                actual: input_transforms.len(),
            });
        }
        if gp.dim() != channels.len() * window {
            return Err(GpError::DimensionMismatch {
                expected: channels.len() * window,
                actual: gp.dim(),
            });
        }
        Ok(Self {
            gp,
            ard: true,
            window,
            channels,
            sample_rate_hz: 1.0,
            input_transforms,
            nox_transform,
            config_hash: String::new(),
        })
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn gp(&self) -> &ExactGp {
        &self.gp
    }

    pub fn hyper(&self) -> &RbfHyperparams {
        self.gp.hyper()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn input_transforms(&self) -> &[ChannelTransform] {
        &self.input_transforms
    }

    pub fn nox_transform(&self) -> &ChannelTransform {
        &self.nox_transform
    }

    /// Width of a windowed row, `d · W`.
    pub fn input_width(&self) -> usize {
        self.channels.len() * self.window
    }

    /// Maps a physical windowed row to normalized space. Column `c` belongs
    /// to channel `c mod d`.
    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        let d = self.channels.len();
        row.iter()
            .enumerate()
            .map(|(c, &v)| self.input_transforms[c % d].forward(v))
            .collect()
    }

    /// Normalized predictive mean and variance at normalized queries.
    pub fn predict_normalized(&self, xq: &DMatrix<f64>) -> Result<Prediction, GpError> {
        self.gp.predict(xq)
    }

    /// `g(x) = Q⁻¹(μ_f(Q(x)))` for each physical windowed row.
    pub fn median_predict(&self, rows: &InputMatrix) -> Result<Vec<f64>, GpError> {
        if rows.cols() != self.input_width() {
            return Err(GpError::DimensionMismatch {
                expected: self.input_width(),
                actual: rows.cols(),
            });
        }
        Ok(rows
            .iter_rows()
            .map(|r| self.nox_transform.inverse(self.gp.mean_at(&self.normalize_row(r))))
            .collect())
    }

    pub fn to_artifact(&self) -> ModelArtifact {
        let x = self.gp.inputs();
        let mut train_inputs = Vec::with_capacity(x.len());
        for a in 0..x.nrows() {
            train_inputs.extend(x.row(a).iter());
        }
        ModelArtifact {
            format: MODEL_FORMAT.into(),
            format_version: MODEL_FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            channels: self.channels.clone(),
            sample_rate_hz: self.sample_rate_hz,
            window: self.window,
            ard: self.ard,
            hyper: self.gp.hyper().clone(),
            jitter: self.gp.jitter(),
            n_train: x.nrows(),
            input_width: x.ncols(),
            train_inputs,
            train_targets: self.gp.targets().iter().copied().collect(),
            input_transforms: self.input_transforms.clone(),
            nox_transform: self.nox_transform.clone(),
        }
    }

    /// Rebuilds the model, re-deriving the factorization and checking that
    /// it reproduces the noisy Gram matrix.
    pub fn from_artifact(a: ModelArtifact) -> Result<Self, GpError> {
        if a.format != MODEL_FORMAT {
            return Err(GpError::BadArtifact(format!("unknown format `{}`", a.format)));
        }
        if a.format_version != MODEL_FORMAT_VERSION {
            return Err(GpError::BadArtifact(format!(
                "unsupported format version {}",
                a.format_version
            )));
        }
        if a.train_inputs.len() != a.n_train * a.input_width || a.train_targets.len() != a.n_train {
            return Err(GpError::BadArtifact("training matrix sizes disagree".into()));
        }
        let x = DMatrix::from_row_slice(a.n_train, a.input_width, &a.train_inputs);
        let y = DVector::from_vec(a.train_targets);
        let gp = ExactGp::fit(x, y, a.hyper)?;
        let err = gp.reconstruction_error()?;
        if !(err <= RECONSTRUCTION_TOL) {
            return Err(GpError::Reconstruction(err));
        }
        let mut m = Self::from_parts(gp, a.window, a.channels, a.input_transforms, a.nox_transform)?;
        m.ard = a.ard;
        m.sample_rate_hz = a.sample_rate_hz;
        m.config_hash = a.config_hash;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String, GpError> {
        Ok(serde_json::to_string(&self.to_artifact())?)
    }

    pub fn from_json(s: &str) -> Result<Self, GpError> {
        Self::from_artifact(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GpError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn normalize_inputs(transforms: &[ChannelTransform], inputs: &InputMatrix) -> Result<InputMatrix, DataError> {
    let d = transforms.len();
    let flat = inputs
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| transforms[i % d].forward(v))
        .collect();
    InputMatrix::from_flat(flat, d)
}

impl NoxPredictor for GpModel {
    fn window(&self) -> usize {
        self.window
    }

    fn channels(&self) -> usize {
        self.channels.len()
    }

    fn predict_trajectory(&self, inputs: &InputMatrix) -> Result<Vec<f64>, DataError> {
        check_trajectory(self, inputs)?;
        let z = normalize_inputs(&self.input_transforms, inputs)?;
        let d = self.channels.len();
        let w = self.window;
        let flat = z.as_slice();
        // windowed row k is the contiguous block of samples k..k+W
        Ok((0..=inputs.rows() - w)
            .map(|k| self.nox_transform.inverse(self.gp.mean_at(&flat[k * d..(k + w) * d])))
            .collect())
    }
}
