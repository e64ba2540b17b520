//! The run configuration: one TOML file drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xcal_core::abc::{AbcConfig, PriorSpec};
use xcal_core::gp::{AdamConfig, GpConfig};
use xcal_core::synth::CycleKind;
use xcal_core::Schema;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Overridden by `--seed`; not part of the config hash.
    #[serde(default)]
    pub seed: u64,
    pub schema: Schema,
    #[serde(default)]
    pub transform: TransformSettings,
    #[serde(default)]
    pub gp: GpSettings,
    pub prior: PriorSettings,
    #[serde(default)]
    pub abc: AbcSettings,
    #[serde(default)]
    pub window: WindowSettings,
    #[serde(default)]
    pub paths: PathSettings,
    #[serde(default)]
    pub simulate: Option<SimulateSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSettings {
    pub transform_inputs: bool,
    pub n_quantiles: Option<usize>,
}

impl Default for TransformSettings {
    fn default() -> Self {
        Self {
            transform_inputs: true,
            n_quantiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSettings {
    pub window_s: f64,
    pub ard: bool,
    pub n_max: usize,
    pub optimizer: AdamConfig,
}

impl Default for GpSettings {
    fn default() -> Self {
        let d = GpConfig::default();
        Self {
            window_s: d.window_s,
            ard: d.ard,
            n_max: d.n_max,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    /// `[lo, hi]` of the uniform prior on the output bias.
    pub alpha: [f64; 2],
    /// One `[lo, hi]` per measured channel, in schema order.
    pub b: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcSettings {
    pub n_pilot: usize,
    pub n_main: usize,
    pub n_desired: usize,
    pub zeta: f64,
    pub sigma_y: f64,
}

impl Default for AbcSettings {
    fn default() -> Self {
        let d = AbcConfig::default();
        Self {
            n_pilot: d.n_pilot,
            n_main: d.n_main,
            n_desired: d.n_desired,
            zeta: d.zeta,
            sigma_y: d.sigma_y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSettings {
    pub warmup_s: f64,
    pub calib_length_s: f64,
}

impl Default for WindowSettings {
    fn default() -> Self {
        Self {
            warmup_s: 80.0,
            calib_length_s: 200.0,
        }
    }
}

/// Output locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub data_dir: PathBuf,
    pub artifacts_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            artifacts_dir: "artifacts".into(),
            reports_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleSpec {
    pub name: String,
    pub cycle: CycleKind,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub id: String,
    pub alpha: f64,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSettings {
    #[serde(default = "default_noise")]
    pub process_noise_std: f64,
    /// Cycles only the nominal engine runs; its training data.
    #[serde(default)]
    pub train_cycles: Vec<CycleSpec>,
    /// Cycles every engine runs, nominal included.
    pub test_cycles: Vec<CycleSpec>,
    pub engines: Vec<EngineSpec>,
}

fn default_noise() -> f64 {
    8.0
}

pub const NOMINAL_ID: &str = "nominal";

impl SimulateSettings {
    /// Training cycles first, then test cycles.
    pub fn all_cycles(&self) -> impl Iterator<Item = &CycleSpec> {
        self.train_cycles.iter().chain(&self.test_cycles)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::InvalidConfig(e.to_string()))
    }

    pub fn gp_config(&self) -> GpConfig {
        GpConfig {
            window_s: self.gp.window_s,
            ard: self.gp.ard,
            n_max: self.gp.n_max,
            transform_inputs: self.transform.transform_inputs,
            n_quantiles: self.transform.n_quantiles,
            optimizer: self.gp.optimizer.clone(),
        }
    }

    pub fn abc_config(&self) -> AbcConfig {
        AbcConfig {
            n_pilot: self.abc.n_pilot,
            n_main: self.abc.n_main,
            n_desired: self.abc.n_desired,
            zeta: self.abc.zeta,
            sigma_y: self.abc.sigma_y,
            seed: self.seed,
        }
    }

    pub fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            alpha_bounds: (self.prior.alpha[0], self.prior.alpha[1]),
            b_bounds: self.prior.b.iter().map(|&[lo, hi]| (lo, hi)).collect(),
        }
    }

    /// SHA-256 over the canonical JSON form, with the seed zeroed so that
    /// `--seed` overrides do not orphan earlier artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        xcal_core::sha256_hex(&json)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        self.schema
            .validate()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        let g = &self.gp;
        if !(g.window_s > 0.0 && g.window_s.is_finite()) {
            return bad(format!("gp.window_s must be positive, got {}", g.window_s));
        }
        if g.n_max == 0 {
            return bad("gp.n_max must be positive".into());
        }
        let o = &g.optimizer;
        if !(o.learning_rate > 0.0 && o.beta1 >= 0.0 && o.beta1 < 1.0 && o.beta2 >= 0.0 && o.beta2 < 1.0 && o.epsilon > 0.0) {
            return bad("gp.optimizer settings out of range".into());
        }
        if self.transform.n_quantiles == Some(0) {
            return bad("transform.n_quantiles must be positive".into());
        }
        self.abc_config()
            .validate()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        let n_measured = self.schema.selection().n_measured();
        self.prior_spec()
            .validate(n_measured)
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        let w = &self.window;
        if !(w.warmup_s >= 0.0 && w.warmup_s.is_finite() && w.calib_length_s > 0.0 && w.calib_length_s.is_finite()) {
            return bad("window.warmup_s must be >= 0 and window.calib_length_s > 0".into());
        }
        if let Some(sim) = &self.simulate {
            if !(sim.process_noise_std >= 0.0 && sim.process_noise_std.is_finite()) {
                return bad("simulate.process_noise_std must be finite and non-negative".into());
            }
            if sim.test_cycles.is_empty() {
                return bad("simulate.test_cycles is empty".into());
            }
            let mut names = std::collections::HashSet::new();
            for c in sim.all_cycles() {
                if !names.insert(c.name.as_str()) {
                    return bad(format!("duplicate cycle name `{}`", c.name));
                }
            }
            let mut ids = std::collections::HashSet::from([NOMINAL_ID]);
            for e in &sim.engines {
                if !ids.insert(e.id.as_str()) {
                    return bad(format!("duplicate or reserved engine id `{}`", e.id));
                }
                if e.b.len() != n_measured {
                    return bad(format!(
                        "engine `{}` has {} biases for {n_measured} measured channels",
                        e.id,
                        e.b.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A loaded config plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = RunConfig::from_toml(&text)?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.validate()?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.data_dir)
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.artifacts_dir)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports_dir)
    }

    pub fn model_path(&self) -> PathBuf {
        self.artifacts_dir().join("model.json")
    }
}
