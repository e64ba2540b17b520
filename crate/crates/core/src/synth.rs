//! Synthetic engines with known ground truth.
//!
//! Four channels: engine speed and fuel quantity are control inputs; the
//! in-cylinder O2 fraction and intake temperature are measured (by default)
//! and can carry sensor offsets. NOx follows [`nox_response`], a fixed
//! function of the last five samples.
//!
//! A sample engine sees the latent inputs `x*`; its sensors report
//! `x = x* + S b*` and its NOx analyser reports `h(x*) + α* + noise`. So
//! removing `b*` from the recorded inputs recovers `x*` exactly.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ChannelRole, ChannelSpec, DataError, EngineDataset, InputMatrix, Schema};
use crate::predictor::{check_trajectory, NoxPredictor};
use crate::rng::{substream, Phase};

pub const SPEED: usize = 0;
pub const FUEL: usize = 1;
pub const O2: usize = 2;
pub const TEMP: usize = 3;
pub const N_CHANNELS: usize = 4;
/// Samples of input history the response depends on.
pub const HISTORY: usize = 5;

const CHANNEL_NAMES: [(&str, &str); N_CHANNELS] = [
    ("engine_speed", "rpm"),
    ("fuel_qty", "mg/stroke"),
    ("o2_in_cylinder", "%"),
    ("intake_temp", "K"),
];

// Lag weights, newest sample first. Fuel acts quickly, O2 with a delay.
const LOAD_WEIGHTS: [f64; HISTORY] = [0.40, 0.25, 0.15, 0.12, 0.08];
const O2_WEIGHTS: [f64; HISTORY] = [0.10, 0.15, 0.25, 0.30, 0.20];

/// The documented NOx response.
///
/// `window` holds `HISTORY` samples of the four channels, oldest first
/// (the same layout as a windowed row). With `L` the lag-weighted fuel
/// quantity over 100, `O` the lag-weighted O2, `T` a blend of the current
/// and two-step-old intake temperature and `n` the speed in krpm:
///
/// `h = 700 L · exp(0.12 (O - 16)) · (0.7 + 0.3 n) + 8 (T - 320) L`
pub fn nox_response(window: &[f64]) -> f64 {
    debug_assert_eq!(window.len(), HISTORY * N_CHANNELS);
    let lag = |k: usize, j: usize| window[(HISTORY - 1 - k) * N_CHANNELS + j];
    let mut load = 0.0;
    let mut o2 = 0.0;
    for k in 0..HISTORY {
        load += LOAD_WEIGHTS[k] * lag(k, FUEL) / 100.0;
        o2 += O2_WEIGHTS[k] * lag(k, O2);
    }
    let temp = 0.6 * lag(0, TEMP) + 0.4 * lag(2, TEMP);
    let speed = lag(0, SPEED) / 1000.0;
    700.0 * load * (0.12 * (o2 - 16.0)).exp() * (0.7 + 0.3 * speed) + 8.0 * (temp - 320.0) * load
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleKind {
    /// Rapid random load changes through first-order lags.
    TransientLike,
    /// Piecewise-constant operating points.
    SteadyStepped,
    /// Alternating transient and steady segments, for nominal training.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Measured-channel flags over the four channels.
    pub mask: Vec<bool>,
    pub cycle: CycleKind,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub true_alpha: f64,
    /// One offset per measured channel.
    #[serde(default)]
    pub true_b: Vec<f64>,
    pub process_noise_std: f64,
}

impl SynthConfig {
    pub fn new(cycle: CycleKind, duration_s: f64, seed: u64) -> Self {
        Self {
            mask: default_mask(),
            cycle,
            duration_s,
            seed,
            true_alpha: 0.0,
            true_b: vec![0.0; 2],
            process_noise_std: 8.0,
        }
    }

    pub fn with_bias(mut self, alpha: f64, b: Vec<f64>) -> Self {
        self.true_alpha = alpha;
        self.true_b = b;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.mask.len() != N_CHANNELS {
            return Err(SynthError::InvalidConfig(format!(
                "mask needs {N_CHANNELS} entries, got {}",
                self.mask.len()
            )));
        }
        let measured = self.mask.iter().filter(|&&m| m).count();
        if self.true_b.len() != measured {
            return Err(SynthError::InvalidConfig(format!(
                "{measured} measured channels but {} biases",
                self.true_b.len()
            )));
        }
        if !(self.duration_s >= 60.0) || !self.duration_s.is_finite() {
            return Err(SynthError::InvalidConfig("duration must be at least 60 s".into()));
        }
        if !(self.process_noise_std >= 0.0) || !self.true_alpha.is_finite() || self.true_b.iter().any(|b| !b.is_finite()) {
            return Err(SynthError::InvalidConfig("non-finite or negative bias/noise".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<Schema, SynthError> {
        self.validate()?;
        Ok(schema_with_mask(&self.mask)?)
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("channel `{channel}`: a {half_width} offset moves NOx by {effect:.3} on average, under 3x the process noise")]
    NotIdentifiable {
        channel: String,
        half_width: f64,
        effect: f64,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// O2 and intake temperature measured, speed and fuel commanded.
pub fn default_mask() -> Vec<bool> {
    vec![false, false, true, true]
}

pub fn schema_with_mask(mask: &[bool]) -> Result<Schema, DataError> {
    Schema::new(
        CHANNEL_NAMES
            .iter()
            .zip(mask)
            .map(|(&(name, units), &m)| {
                let role = if m { ChannelRole::Measured } else { ChannelRole::Control };
                ChannelSpec::new(name, role, units)
            })
            .collect(),
    )
}

/// Schema with the default channel roles.
pub fn schema() -> Schema {
    schema_with_mask(&default_mask()).expect("built-in schema is valid")
}

/// The true response as a predictor over raw trajectories.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrueResponse;

impl NoxPredictor for TrueResponse {
    fn window(&self) -> usize {
        HISTORY
    }

    fn channels(&self) -> usize {
        N_CHANNELS
    }

    fn predict_trajectory(&self, inputs: &InputMatrix) -> Result<Vec<f64>, DataError> {
        check_trajectory(self, inputs)?;
        let flat = inputs.as_slice();
        Ok((0..=inputs.rows() - HISTORY)
            .map(|k| nox_response(&flat[k * N_CHANNELS..(k + HISTORY) * N_CHANNELS]))
            .collect())
    }
}

/// Steady-state O2 for an operating point, before EGR variation.
fn o2_for(speed: f64, fuel: f64) -> f64 {
    20.0 - 10.0 * fuel / 120.0 * (1.2 - 0.2 * speed / 2200.0)
}

/// Full-load fueling limit, mg/stroke.
const FUEL_LIMIT: f64 = 120.0;

fn temp_target(fuel: f64) -> f64 {
    305.0 + 40.0 * fuel / 120.0
}

/// Latent-input generator state.
struct Cycle {
    rng: ChaCha8Rng,
    speed: f64,
    fuel: f64,
    egr: f64,
    // slow ambient drift on the intake temperature
    ambient: f64,
    temp: f64,
    rows: Vec<[f64; N_CHANNELS]>,
}

impl Cycle {
    fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            speed: 800.0,
            fuel: 10.0,
            egr: 0.0,
            ambient: 0.0,
            temp: temp_target(10.0),
            rows: Vec::new(),
        }
    }

    fn transient(&mut self, n: usize) {
        let end = self.rows.len() + n;
        while self.rows.len() < end {
            let hold = self.rng.random_range(3..=12);
            let speed_target = self.rng.random_range(800.0..2200.0);
            // fuel cut: no combustion, so no NOx whatever the other channels say
            let fuel_target = if self.rng.random_bool(0.3) {
                0.0
            } else {
                // low loads dominate, as on road cycles; demands above the
                // fueling limit are cut to it below
                5.0 + 125.0 * self.rng.random::<f64>().powi(2)
            };
            for _ in 0..hold {
                if self.rows.len() >= end {
                    break;
                }
                self.speed += (speed_target - self.speed) / 3.0;
                self.fuel = (self.fuel + (fuel_target - self.fuel) / 1.5).min(FUEL_LIMIT);
                self.egr = 0.97 * self.egr + 0.3 * self.rng.sample::<f64, _>(StandardNormal);
                self.ambient = 0.99 * self.ambient + 0.7 * self.rng.sample::<f64, _>(StandardNormal);
                self.temp += (temp_target(self.fuel) + self.ambient - self.temp) / 20.0;
                let o2 = (o2_for(self.speed, self.fuel) - self.egr).clamp(8.0, 21.0);
                self.rows.push([self.speed, self.fuel, o2, self.temp]);
            }
        }
    }

    fn steady(&mut self, n: usize, modes: usize) {
        let start = self.rows.len();
        for m in 0..modes {
            let len = (m + 1) * n / modes - m * n / modes;
            let speed = self.rng.random_range(900.0..2100.0);
            let fuel = self.rng.random_range(10.0..110.0);
            let o2 = (o2_for(speed, fuel) - self.rng.random_range(-2.5..2.5)).clamp(8.0, 21.0);
            let temp = temp_target(fuel) + self.rng.random_range(-8.0..8.0);
            self.rows.extend(std::iter::repeat_n([speed, fuel, o2, temp], len));
            (self.speed, self.fuel, self.temp, self.egr, self.ambient) = (speed, fuel, temp, 0.0, 0.0);
        }
        debug_assert_eq!(self.rows.len(), start + n);
    }
}

/// Number of steady operating points in a steady-stepped cycle.
pub fn steady_mode_count(samples: usize) -> usize {
    (samples / 100).max(10)
}

/// Latent inputs: `T × 4` with `T = round(duration_s) + 1` samples at 1 Hz.
pub fn latent_inputs(kind: CycleKind, duration_s: f64, seed: u64) -> InputMatrix {
    let t = duration_s.round() as usize + 1;
    let mut c = Cycle::new(substream(seed, Phase::SynthInputs, 0));
    match kind {
        CycleKind::TransientLike => c.transient(t),
        CycleKind::SteadyStepped => c.steady(t, steady_mode_count(t)),
        CycleKind::Mixed => {
            let mut left = t;
            let mut steady = false;
            while left > 0 {
                let n = left.min(300);
                if steady {
                    c.steady(n, 3);
                } else {
                    c.transient(n);
                }
                steady = !steady;
                left -= n;
            }
        }
    }
    let flat = c.rows.iter().flatten().copied().collect();
    InputMatrix::from_flat(flat, N_CHANNELS).expect("rows have four channels")
}

/// Noise-free NOx at every sample of a latent trajectory. The first
/// `HISTORY - 1` samples reuse the first row as their missing history.
pub fn latent_nox(latent: &InputMatrix) -> Vec<f64> {
    let t = latent.rows();
    let mut window = vec![0.0; HISTORY * N_CHANNELS];
    (0..t)
        .map(|i| {
            for slot in 0..HISTORY {
                let src = (i + slot).saturating_sub(HISTORY - 1);
                window[slot * N_CHANNELS..(slot + 1) * N_CHANNELS].copy_from_slice(latent.row(src));
            }
            nox_response(&window)
        })
        .collect()
}

/// A generated engine together with the inputs it actually ran on.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: EngineDataset,
    pub latent: InputMatrix,
}

/// Records a sample engine with the configured biases.
pub fn generate(cfg: &SynthConfig) -> Result<Generated, SynthError> {
    let schema = Arc::new(cfg.schema()?);
    let latent = latent_inputs(cfg.cycle, cfg.duration_s, cfg.seed);
    let sel = schema.selection();
    let offsets = sel.embed(&cfg.true_b)?;
    let recorded: Vec<f64> = latent
        .iter_rows()
        .flat_map(|r| r.iter().zip(&offsets).map(|(x, b)| x + b).collect::<Vec<_>>())
        .collect();
    let mut noise_rng = substream(cfg.seed, Phase::SynthNoise, 0);
    let nox = latent_nox(&latent)
        .into_iter()
        .map(|y| {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            y + cfg.true_alpha + cfg.process_noise_std * z
        })
        .collect();
    let time = (0..latent.rows()).map(|i| i as f64).collect();
    let dataset = EngineDataset::new(
        "synthetic",
        cycle_name(cfg.cycle),
        schema,
        time,
        InputMatrix::from_flat(recorded, N_CHANNELS)?,
        nox,
    )?;
    Ok(Generated { dataset, latent })
}

/// The unbiased engine for the config's cycle and seed.
pub fn generate_nominal(cfg: &SynthConfig) -> Result<EngineDataset, SynthError> {
    let nominal = SynthConfig {
        true_alpha: 0.0,
        true_b: vec![0.0; cfg.true_b.len()],
        ..cfg.clone()
    };
    Ok(generate(&nominal)?.dataset.with_ids("nominal", cycle_name(cfg.cycle)))
}

pub fn generate_sample_engine(cfg: &SynthConfig) -> Result<EngineDataset, SynthError> {
    Ok(generate(cfg)?.dataset)
}

fn cycle_name(kind: CycleKind) -> &'static str {
    match kind {
        CycleKind::TransientLike => "transient",
        CycleKind::SteadyStepped => "steady",
        CycleKind::Mixed => "mixed",
    }
}

/// Mean |ΔNOx| when each measured channel alone is offset by its half-width.
pub fn bias_sensitivity(latent: &InputMatrix, mask: &[bool], half_widths: &[f64]) -> Result<Vec<f64>, SynthError> {
    let measured: Vec<usize> = (0..N_CHANNELS).filter(|&j| mask[j]).collect();
    if half_widths.len() != measured.len() {
        return Err(SynthError::InvalidConfig("one half-width per measured channel".into()));
    }
    let base = TrueResponse.predict_trajectory(latent)?;
    measured
        .iter()
        .zip(half_widths)
        .map(|(&j, &hw)| {
            let shifted: Vec<f64> = latent
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| if i % N_CHANNELS == j { v + hw } else { v })
                .collect();
            let moved = TrueResponse.predict_trajectory(&InputMatrix::from_flat(shifted, N_CHANNELS)?)?;
            let mean = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum::<f64>() / base.len() as f64;
            Ok(mean)
        })
        .collect()
}

/// Fails unless every measured channel's half-width offset moves NOx by at
/// least three times the process noise on this cycle.
pub fn check_identifiability(cfg: &SynthConfig, half_widths: &[f64]) -> Result<Vec<f64>, SynthError> {
    cfg.validate()?;
    let latent = latent_inputs(cfg.cycle, cfg.duration_s, cfg.seed);
    let effects = bias_sensitivity(&latent, &cfg.mask, half_widths)?;
    let names: Vec<&str> = (0..N_CHANNELS).filter(|&j| cfg.mask[j]).map(|j| CHANNEL_NAMES[j].0).collect();
    for ((name, &hw), &effect) in names.iter().zip(half_widths).zip(&effects) {
        if effect < 3.0 * cfg.process_noise_std {
            return Err(SynthError::NotIdentifiable {
                channel: (*name).to_string(),
                half_width: hw,
                effect,
            });
        }
    }
    Ok(effects)
}
