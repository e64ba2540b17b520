//! The five pipeline stages. Each reads and writes plain files so that a
//! stage can be rerun on its own.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xcal_core::abc::{self, BiasParameters, EvaluationReport, Parallelism, PosteriorSampleSet, PredictiveEnsemble, Provenance};
use xcal_core::data::{load_dataset, slice_calibration_window, write_dataset};
use xcal_core::gp::RbfHyperparams;
use xcal_core::rng::{substream, Phase};
use xcal_core::stats::{self, ErrorSummary};
use xcal_core::synth::{self, SynthConfig};
use xcal_core::{sha256_hex, EngineDataset, GpModel, NoxPredictor};

use crate::config::{CycleSpec, EngineSpec, Loaded, NOMINAL_ID};
use crate::CliError;

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ))
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        require_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn load(l: &Loaded, path: &Path) -> Result<EngineDataset, CliError> {
    require_file(path)?;
    Ok(load_dataset(path, Arc::new(l.config.schema.clone()))?)
}

/// Reads a model and the hash of its file bytes.
fn load_model(path: &Path) -> Result<(GpModel, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Artifact(format!("{}: not UTF-8", path.display())))?;
    let model = GpModel::from_json(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    Ok((model, sha256_hex(text.as_bytes())))
}

fn check_channels(model: &GpModel, l: &Loaded) -> Result<(), CliError> {
    let names: Vec<&str> = l.config.schema.channels.iter().map(|c| c.name.as_str()).collect();
    if model.channel_names() != names.as_slice() {
        return Err(CliError::Artifact(format!(
            "model channels {:?} differ from config channels {names:?}",
            model.channel_names()
        )));
    }
    Ok(())
}

/// Writes the resolved config next to the artifacts, named by its hash.
fn echo_config(l: &Loaded) -> Result<PathBuf, CliError> {
    let hash = l.config.hash();
    let path = l
        .artifacts_dir()
        .join(format!("config-{}-seed{}.toml", &hash[..12], l.config.seed));
    let text = toml::to_string(&l.config).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    write_file(&path, text)?;
    Ok(path)
}

pub fn dataset_file(l: &Loaded, engine: &str, cycle: &str) -> PathBuf {
    l.data_dir().join(format!("{engine}_{cycle}.csv"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    #[serde(flatten)]
    pub spec: CycleSpec,
    pub seed: u64,
    pub nominal_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config_hash: String,
    pub seed: u64,
    pub process_noise_std: f64,
    pub measured_channels: Vec<String>,
    pub cycles: Vec<CycleRecord>,
    pub engines: Vec<EngineSpec>,
}

/// Writes `nominal_<cycle>.csv` for every cycle, `<engine>_<cycle>.csv` for
/// every sample engine and test cycle, and `ground_truth.json`.
///
/// All engines run the same realization of each cycle, so an engine with
/// zero biases reproduces the nominal files exactly.
pub fn simulate(l: &Loaded) -> Result<Vec<PathBuf>, CliError> {
    let c = &l.config;
    let sim = c
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::InvalidConfig("no [simulate] section".into()))?;
    let want = synth::schema();
    let names: Vec<&str> = c.schema.channels.iter().map(|ch| ch.name.as_str()).collect();
    let synth_names: Vec<&str> = want.channels.iter().map(|ch| ch.name.as_str()).collect();
    if names != synth_names || c.schema.sample_rate_hz != 1.0 {
        return Err(CliError::InvalidConfig(format!(
            "the simulator produces channels {synth_names:?} at 1 Hz"
        )));
    }
    let mask = c.schema.selection().mask().to_vec();
    let dir = l.data_dir();
    require_dir(&dir)?;

    let half_widths: Vec<f64> = c.prior.b.iter().map(|[lo, hi]| 0.5 * (hi - lo)).collect();
    let n_train = sim.train_cycles.len();
    let mut cycles = Vec::new();
    let mut written = Vec::new();
    for (k, spec) in sim.all_cycles().enumerate() {
        let seed: u64 = substream(c.seed, Phase::Fleet, k as u64).random();
        let base = SynthConfig {
            mask: mask.clone(),
            cycle: spec.cycle,
            duration_s: spec.duration_s,
            seed,
            true_alpha: 0.0,
            true_b: vec![0.0; half_widths.len()],
            process_noise_std: sim.process_noise_std,
        };
        let nominal = synth::generate_nominal(&base)?.with_ids(NOMINAL_ID, spec.name.as_str());
        let path = dataset_file(l, NOMINAL_ID, &spec.name);
        write_dataset(&path, &nominal)?;
        written.push(path);
        let nominal_only = k < n_train;
        if !nominal_only {
            if let Err(e) = synth::check_identifiability(&base, &half_widths) {
                return Err(CliError::InvalidConfig(format!("cycle `{}`: {e}", spec.name)));
            }
            log::info!("cycle `{}`: writing {} engine dataset(s)", spec.name, sim.engines.len());
            for e in &sim.engines {
                let cfg = base.clone().with_bias(e.alpha, e.b.clone());
                let ds = synth::generate_sample_engine(&cfg)?.with_ids(e.id.as_str(), spec.name.as_str());
                let path = dataset_file(l, &e.id, &spec.name);
                write_dataset(&path, &ds)?;
                written.push(path);
            }
        }
        cycles.push(CycleRecord {
            spec: spec.clone(),
            seed,
            nominal_only,
        });
    }
    let truth = GroundTruth {
        config_hash: c.hash(),
        seed: c.seed,
        process_noise_std: sim.process_noise_std,
        measured_channels: c.schema.measured_names().iter().map(|s| s.to_string()).collect(),
        cycles,
        engines: sim.engines.clone(),
    };
    let path = dir.join("ground_truth.json");
    write_file(&path, to_json_pretty(&truth))?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRow {
    pub dataset: String,
    pub n: usize,
    pub rmse: f64,
    pub p90: f64,
    pub p95: f64,
    pub p98: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub training_files: Vec<String>,
    pub n_train: usize,
    pub input_width: usize,
    pub jitter: f64,
    pub hyper: RbfHyperparams,
    /// Zero-bias residuals of the trained model on nominal validation data;
    /// their RMS is a reasonable `abc.sigma_y`.
    pub validation: Vec<ValidationRow>,
}

pub struct Trained {
    pub model_path: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainReport,
}

/// Fits the nominal model. Without `--data` the nominal training cycles
/// from `[simulate]` are used, and without `--validate` the nominal test
/// cycles.
pub fn train(l: &Loaded, data: &[PathBuf], validate: &[PathBuf], out: Option<&Path>) -> Result<Trained, CliError> {
    let c = &l.config;
    let sim_files = |pick: fn(&crate::config::SimulateSettings) -> &Vec<CycleSpec>| -> Vec<PathBuf> {
        c.simulate
            .as_ref()
            .map(|s| pick(s).iter().map(|cy| dataset_file(l, NOMINAL_ID, &cy.name)).collect())
            .unwrap_or_default()
    };
    let data = if data.is_empty() { sim_files(|s| &s.train_cycles) } else { data.to_vec() };
    if data.is_empty() {
        return Err(CliError::Usage("no training data: pass --data or list simulate.train_cycles".into()));
    }
    let validate = if validate.is_empty() {
        sim_files(|s| &s.test_cycles).into_iter().filter(|p| p.is_file()).collect()
    } else {
        validate.to_vec()
    };
    let model_path = out.map(Path::to_path_buf).unwrap_or_else(|| l.model_path());
    let report_path = l.reports_dir().join("train_report.json");
    for p in data.iter().chain(&validate) {
        require_file(p)?;
    }
    for p in [&model_path, &report_path] {
        require_dir(p.parent().unwrap_or(Path::new(".")))?;
    }

    let datasets = data.iter().map(|p| load(l, p)).collect::<Result<Vec<_>, _>>()?;
    log::info!("fitting GP on {} dataset(s)", datasets.len());
    let model = GpModel::fit(&datasets, &c.gp_config(), c.seed)?.with_config_hash(c.hash());
    let json = model.to_json()?;
    write_file(&model_path, &json)?;
    echo_config(l)?;

    let mut rows = Vec::new();
    for p in &validate {
        let ds = load(l, p)?;
        let pred = abc::baseline_trajectory(&ds, &model)?;
        let obs = abc::observed_series(&ds, model.window())?;
        let e = ErrorSummary::compute(obs, &pred).map_err(|e| CliError::Inference(e.to_string()))?;
        rows.push(ValidationRow {
            dataset: p.display().to_string(),
            n: obs.len(),
            rmse: e.rmse,
            p90: e.p90,
            p95: e.p95,
            p98: e.p98,
        });
    }
    let report = TrainReport {
        config_hash: c.hash(),
        model_hash: sha256_hex(json.as_bytes()),
        seed: c.seed,
        training_files: data.iter().map(|p| p.display().to_string()).collect(),
        n_train: model.gp().n_train(),
        input_width: model.input_width(),
        jitter: model.gp().jitter(),
        hyper: model.hyper().clone(),
        validation: rows,
    };
    write_file(&report_path, to_json_pretty(&report))?;
    Ok(Trained {
        model_path,
        report_path,
        report,
    })
}

pub struct Calibrated {
    pub posterior_path: PathBuf,
    pub marginals_path: PathBuf,
    pub posterior: PosteriorSampleSet,
}

/// Runs ABC on the calibration window of `data`. With `epsilon` the pilot
/// phase is skipped and that tolerance used directly.
pub fn calibrate(
    l: &Loaded,
    model_path: &Path,
    data: &Path,
    epsilon: Option<f64>,
    out: Option<&Path>,
    par: Parallelism,
) -> Result<Calibrated, CliError> {
    let c = &l.config;
    if let Some(eps) = epsilon {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(CliError::Usage(format!("--epsilon must be finite and non-negative, got {eps}")));
        }
    }
    let name = stem(data);
    let posterior_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| l.artifacts_dir().join(format!("posterior_{name}.json")));
    let marginals_path = l.reports_dir().join(format!("marginals_{name}.csv"));
    require_file(model_path)?;
    require_file(data)?;
    for p in [&posterior_path, &marginals_path] {
        require_dir(p.parent().unwrap_or(Path::new(".")))?;
    }

    let (model, model_hash) = load_model(model_path)?;
    check_channels(&model, l)?;
    let ds = load(l, data)?;
    let (cal, _) = slice_calibration_window(&ds, c.window.warmup_s, c.window.calib_length_s)?;
    let prior = c.prior_spec();
    let cfg = c.abc_config();
    log::info!("calibrating on {} ({} window samples)", data.display(), cal.len());
    let mut set = match epsilon {
        Some(eps) => abc::main_phase(&cal, &model, &prior, &cfg, eps, par)?,
        None => abc::calibrate(&cal, &model, &prior, &cfg, par)?,
    };
    set.provenance = Provenance {
        config_hash: c.hash(),
        model_hash,
        seed: c.seed,
    };
    write_file(&posterior_path, set.to_json()? + "\n")?;
    echo_config(l)?;

    let names: Vec<String> = c.schema.measured_names().iter().map(|s| s.to_string()).collect();
    let rows = abc::marginal_summary(&set, &names)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Artifact(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Artifact(e.to_string()))?;
    write_file(&marginals_path, bytes)?;
    Ok(Calibrated {
        posterior_path,
        marginals_path,
        posterior: set,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Slice {
    /// Everything after the calibration window.
    #[default]
    Holdout,
    /// The whole cycle.
    Full,
    /// The calibration window itself.
    Calibration,
}

/// One row of the prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub time_s: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub observed: f64,
    /// Zero-bias prediction of the uncalibrated model.
    pub baseline: f64,
}

pub struct Predicted {
    pub path: PathBuf,
    pub rows: Vec<PredictionRow>,
}

pub fn predict(
    l: &Loaded,
    model_path: &Path,
    posterior_path: &Path,
    data: &Path,
    slice: Slice,
    out: Option<&Path>,
    par: Parallelism,
) -> Result<Predicted, CliError> {
    let c = &l.config;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| l.reports_dir().join(format!("predict_{}.csv", stem(data))));
    for p in [model_path, posterior_path, data] {
        require_file(p)?;
    }
    require_dir(path.parent().unwrap_or(Path::new(".")))?;

    let (model, model_hash) = load_model(model_path)?;
    check_channels(&model, l)?;
    let set = PosteriorSampleSet::load(posterior_path)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", posterior_path.display())))?;
    if set.provenance.model_hash != model_hash {
        return Err(CliError::Provenance(format!(
            "posterior was calibrated against model {}, not {model_hash}",
            set.provenance.model_hash
        )));
    }
    if set.provenance.config_hash != model.config_hash() {
        return Err(CliError::Provenance(format!(
            "posterior config {} differs from model config {}",
            set.provenance.config_hash,
            model.config_hash()
        )));
    }
    let ds = load(l, data)?;
    let part = match slice {
        Slice::Full => ds,
        Slice::Holdout => slice_calibration_window(&ds, c.window.warmup_s, c.window.calib_length_s)?.1,
        Slice::Calibration => slice_calibration_window(&ds, c.window.warmup_s, c.window.calib_length_s)?.0,
    };
    let ens = abc::posterior_predictive(&set, &part, &model, set.config.sigma_y, c.seed, par)?;
    let baseline = abc::baseline_trajectory(&part, &model)?;
    let rows: Vec<PredictionRow> = (0..ens.len())
        .map(|t| PredictionRow {
            time_s: ens.time[t],
            median: ens.median[t],
            lo95: ens.lo95[t],
            hi95: ens.hi95[t],
            observed: ens.observed[t],
            baseline: baseline[t],
        })
        .collect();
    write_file(&path, csv_bytes(&rows)?)?;
    Ok(Predicted { path, rows })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Artifact(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Artifact(e.to_string()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, CliError> {
    require_file(path)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<PredictionRow>, _>>()
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub rmse: f64,
    pub p90: f64,
    pub p95: f64,
    pub p98: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub predictions: String,
    pub observations: String,
    pub n: usize,
    pub calibrated: EvaluationReport,
    pub baseline: BaselineMetrics,
    /// Calibrated over baseline RMSE.
    pub rmse_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CumulativeRow {
    time_s: f64,
    observed: f64,
    median: f64,
    lo95: f64,
    hi95: f64,
    baseline: f64,
}

pub struct Evaluated {
    pub report_path: PathBuf,
    pub cumulative_path: PathBuf,
    pub report: Report,
}

/// Scores a prediction CSV against the observations in a dataset, matched
/// on time.
pub fn evaluate(l: &Loaded, predictions: &Path, data: &Path, out_dir: Option<&Path>) -> Result<Evaluated, CliError> {
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| l.reports_dir());
    let name = stem(predictions);
    let name = name.strip_prefix("predict_").unwrap_or(&name).to_string();
    let report_path = dir.join(format!("report_{name}.json"));
    let cumulative_path = dir.join(format!("cumulative_{name}.csv"));
    require_file(data)?;
    require_dir(&dir)?;
    let rows = read_predictions(predictions)?;
    if rows.is_empty() {
        return Err(CliError::Artifact(format!("{}: no prediction rows", predictions.display())));
    }
    let ds = load(l, data)?;
    let tol = 1e-9 * ds.step();
    let observed = rows
        .iter()
        .map(|r| {
            let i = ds.time().partition_point(|&t| t < r.time_s - tol);
            match ds.time().get(i) {
                Some(&t) if (t - r.time_s).abs() <= tol => Ok(ds.nox()[i]),
                _ => Err(CliError::Artifact(format!("no observation at t = {} s", r.time_s))),
            }
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let col = |f: fn(&PredictionRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let ens = PredictiveEnsemble {
        time: col(|r| r.time_s),
        observed: observed.clone(),
        samples: Vec::new(),
        median: col(|r| r.median),
        lo95: col(|r| r.lo95),
        hi95: col(|r| r.hi95),
    };
    let baseline = col(|r| r.baseline);
    let (calibrated, cum) = abc::evaluate(&ens, &observed)?;
    let stats_err = |e: stats::StatsError| CliError::Artifact(e.to_string());
    let b = ErrorSummary::compute(&observed, &baseline).map_err(stats_err)?;
    let dt = ds.step();
    let cum_baseline = stats::cumulative_series(&baseline, dt).map_err(stats_err)?;
    let report = Report {
        predictions: predictions.display().to_string(),
        observations: data.display().to_string(),
        n: rows.len(),
        rmse_ratio: calibrated.rmse / b.rmse,
        calibrated,
        baseline: BaselineMetrics {
            rmse: b.rmse,
            p90: b.p90,
            p95: b.p95,
            p98: b.p98,
        },
    };
    write_file(&report_path, to_json_pretty(&report))?;
    let cum_rows: Vec<CumulativeRow> = (0..cum.time.len())
        .map(|t| CumulativeRow {
            time_s: cum.time[t],
            observed: cum.observed[t],
            median: cum.median[t],
            lo95: cum.lo95[t],
            hi95: cum.hi95[t],
            baseline: cum_baseline[t],
        })
        .collect();
    write_file(&cumulative_path, csv_bytes(&cum_rows)?)?;
    Ok(Evaluated {
        report_path,
        cumulative_path,
        report,
    })
}

/// Posterior median of a saved sample set.
pub fn posterior_median(path: &Path) -> Result<BiasParameters, CliError> {
    let set = PosteriorSampleSet::load(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    Ok(set.median()?)
}
