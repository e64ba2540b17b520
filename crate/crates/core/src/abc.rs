//! ABC rejection sampling of per-engine biases.
//!
//! A draw `θ = (α, b)` from a uniform prior is scored by simulating the
//! calibration segment, `y_t = g(window(x - S b))_t + α + σ_y z_t`, and taking
//! the two-sample KS distance to the observed NOx. A pilot run fixes the
//! tolerance as the ζ-quantile of prior-predictive distances; the main run
//! keeps the first `n_desired` draws within that tolerance.
//!
//! Every draw owns a counter-addressed random stream, so the accepted set is
//! the same whether draws are evaluated sequentially or in parallel.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EngineDataset, InputMatrix, SelectionMatrix};
use crate::predictor::NoxPredictor;
use crate::rng::{substream, Phase};
use crate::stats::{self, ErrorSummary, StatsError};

/// Draws evaluated per batch before the ordered acceptance scan.
const BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum AbcError {
    #[error("invalid ABC configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("prior has zero width and every pilot distance is identical")]
    DegeneratePrior,
    #[error("no draw within epsilon = {epsilon} after {attempted} attempts")]
    NoSamplesAccepted { epsilon: f64, attempted: usize },
    #[error("posterior sample set is empty")]
    EmptyPosterior,
    #[error("length mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Independent uniform priors on α and on each measured-channel bias.
///
/// A bound pair with `lo == hi` pins that parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub alpha_bounds: (f64, f64),
    pub b_bounds: Vec<(f64, f64)>,
}

impl PriorSpec {
    pub fn validate(&self, n_measured: usize) -> Result<(), AbcError> {
        if self.b_bounds.len() != n_measured {
            return Err(AbcError::InvalidPrior(format!(
                "{} bias bounds for {n_measured} measured channels",
                self.b_bounds.len()
            )));
        }
        for (name, (lo, hi)) in std::iter::once(("alpha".to_string(), self.alpha_bounds))
            .chain(self.b_bounds.iter().enumerate().map(|(k, b)| (format!("b[{k}]"), *b)))
        {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AbcError::InvalidPrior(format!("{name}: bounds ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn bounds(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        std::iter::once(self.alpha_bounds).chain(self.b_bounds.iter().copied())
    }

    pub fn is_point(&self) -> bool {
        self.bounds().all(|(lo, hi)| lo == hi)
    }

    /// Midpoint of every bound pair.
    pub fn median(&self) -> BiasParameters {
        let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
        BiasParameters {
            alpha: mid(self.alpha_bounds),
            b: self.b_bounds.iter().copied().map(mid).collect(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> BiasParameters {
        let mut u = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        BiasParameters {
            alpha: u(self.alpha_bounds),
            b: self.b_bounds.iter().map(|&b| u(b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbcConfig {
    pub n_pilot: usize,
    pub n_main: usize,
    pub n_desired: usize,
    /// Pilot-distance quantile used as the tolerance.
    pub zeta: f64,
    /// Observation noise standard deviation, physical NOx units.
    pub sigma_y: f64,
    pub seed: u64,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self {
            n_pilot: 1000,
            n_main: 10_000,
            n_desired: 500,
            zeta: 0.05,
            sigma_y: 0.0,
            seed: 0,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<(), AbcError> {
        let bad = |m: &str| Err(AbcError::InvalidConfig(m.into()));
        if self.n_pilot == 0 || self.n_main == 0 || self.n_desired == 0 {
            return bad("sample counts must be positive");
        }
        if self.n_desired > self.n_main {
            return bad("n_desired exceeds n_main");
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)");
        }
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return bad("sigma_y must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasParameters {
    pub alpha: f64,
    pub b: Vec<f64>,
}

impl BiasParameters {
    pub fn zero(n_measured: usize) -> Self {
        Self {
            alpha: 0.0,
            b: vec![0.0; n_measured],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// Where a posterior came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    pub engine_id: String,
    pub epsilon: f64,
    pub acceptance_rate: f64,
    pub attempted: usize,
    pub samples: Vec<BiasParameters>,
    pub distances: Vec<f64>,
    /// Main-phase draw index of each accepted sample.
    pub draw_indices: Vec<u64>,
    pub prior: PriorSpec,
    pub config: AbcConfig,
    pub provenance: Provenance,
}

impl PosteriorSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-parameter posterior median (α first, then each b).
    pub fn median(&self) -> Result<BiasParameters, AbcError> {
        if self.samples.is_empty() {
            return Err(AbcError::EmptyPosterior);
        }
        let alpha: Vec<f64> = self.samples.iter().map(|s| s.alpha).collect();
        let n_b = self.samples[0].b.len();
        let b = (0..n_b)
            .map(|k| {
                let col: Vec<f64> = self.samples.iter().map(|s| s.b[k]).collect();
                stats::quantile(&col, 0.5)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BiasParameters {
            alpha: stats::quantile(&alpha, 0.5)?,
            b,
        })
    }

    pub fn to_json(&self) -> Result<String, AbcError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), AbcError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AbcError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Prior against posterior 2.5/50/97.5 % quantiles for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub parameter: String,
    pub prior_lo: f64,
    pub prior_median: f64,
    pub prior_hi: f64,
    pub posterior_lo: f64,
    pub posterior_median: f64,
    pub posterior_hi: f64,
}

pub fn marginal_summary(set: &PosteriorSampleSet, names: &[String]) -> Result<Vec<MarginalSummary>, AbcError> {
    if set.samples.is_empty() {
        return Err(AbcError::EmptyPosterior);
    }
    let mut rows = Vec::new();
    let columns = std::iter::once(("alpha".to_string(), set.prior.alpha_bounds, set.samples.iter().map(|s| s.alpha).collect::<Vec<_>>()))
        .chain(set.prior.b_bounds.iter().enumerate().map(|(k, &bounds)| {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("b{k}"));
            (format!("b_{name}"), bounds, set.samples.iter().map(|s| s.b[k]).collect())
        }));
    for (parameter, (lo, hi), col) in columns {
        let mut sorted = col;
        sorted.sort_by(f64::total_cmp);
        rows.push(MarginalSummary {
            parameter,
            prior_lo: lo + 0.025 * (hi - lo),
            prior_median: 0.5 * (lo + hi),
            prior_hi: lo + 0.975 * (hi - lo),
            posterior_lo: stats::quantile_sorted(&sorted, 0.025),
            posterior_median: stats::quantile_sorted(&sorted, 0.5),
            posterior_hi: stats::quantile_sorted(&sorted, 0.975),
        });
    }
    Ok(rows)
}

fn simulate_inputs<P: NoxPredictor + ?Sized>(
    theta: &BiasParameters,
    inputs: &InputMatrix,
    sel: &SelectionMatrix,
    predictor: &P,
    sigma_y: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AbcError> {
    let corrected = inputs.with_bias_removed(sel, &theta.b)?;
    let mut y = predictor.predict_trajectory(&corrected)?;
    for v in &mut y {
        let z: f64 = StandardNormal.sample(rng);
        *v += theta.alpha + sigma_y * z;
    }
    Ok(y)
}

/// One simulated NOx trajectory for `theta`, aligned to window ends
/// (length `T - W + 1`). The bias is removed from the raw inputs before
/// windowing.
pub fn simulate_trajectory<P: NoxPredictor + ?Sized>(
    theta: &BiasParameters,
    ds: &EngineDataset,
    predictor: &P,
    sigma_y: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AbcError> {
    simulate_inputs(theta, ds.inputs(), &ds.selection(), predictor, sigma_y, rng)
}

/// The zero-bias model prediction on a dataset.
pub fn baseline_trajectory<P: NoxPredictor + ?Sized>(ds: &EngineDataset, predictor: &P) -> Result<Vec<f64>, AbcError> {
    Ok(predictor.predict_trajectory(ds.inputs())?)
}

/// Observed NOx at window ends, the series simulations are compared to.
pub fn observed_series(ds: &EngineDataset, window: usize) -> Result<&[f64], AbcError> {
    if window == 0 || window > ds.len() {
        return Err(DataError::WindowTooLong(window as f64).into());
    }
    Ok(&ds.nox()[window - 1..])
}

/// Shared state for scoring draws against one calibration segment.
struct Scorer<'a, P: ?Sized> {
    predictor: &'a P,
    inputs: &'a InputMatrix,
    sel: SelectionMatrix,
    observed_sorted: Vec<f64>,
    prior: &'a PriorSpec,
    sigma_y: f64,
    seed: u64,
}

impl<'a, P: NoxPredictor + ?Sized> Scorer<'a, P> {
    fn new(ds: &'a EngineDataset, predictor: &'a P, prior: &'a PriorSpec, cfg: &AbcConfig) -> Result<Self, AbcError> {
        cfg.validate()?;
        let sel = ds.selection();
        prior.validate(sel.n_measured())?;
        let mut observed_sorted = observed_series(ds, predictor.window())?.to_vec();
        observed_sorted.sort_by(f64::total_cmp);
        Ok(Self {
            predictor,
            inputs: ds.inputs(),
            sel,
            observed_sorted,
            prior,
            sigma_y: cfg.sigma_y,
            seed: cfg.seed,
        })
    }

    fn score(&self, phase: Phase, index: u64) -> Result<(BiasParameters, f64), AbcError> {
        let mut rng: ChaCha8Rng = substream(self.seed, phase, index);
        let theta = self.prior.sample(&mut rng);
        let mut sim = simulate_inputs(&theta, self.inputs, &self.sel, self.predictor, self.sigma_y, &mut rng)?;
        if sim.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite.into());
        }
        sim.sort_by(f64::total_cmp);
        Ok((theta, stats::ks_sorted(&sim, &self.observed_sorted)))
    }

    fn score_range(&self, phase: Phase, range: std::ops::Range<u64>, par: Parallelism) -> Result<Vec<(BiasParameters, f64)>, AbcError> {
        match par {
            Parallelism::Sequential => range.map(|i| self.score(phase, i)).collect(),
            Parallelism::Parallel => range.into_par_iter().map(|i| self.score(phase, i)).collect(),
        }
    }
}

/// Pilot outcome: the tolerance and every pilot distance in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pilot {
    pub epsilon: f64,
    pub distances: Vec<f64>,
}

pub fn pilot_phase<P: NoxPredictor + ?Sized>(
    ds: &EngineDataset,
    predictor: &P,
    prior: &PriorSpec,
    cfg: &AbcConfig,
    par: Parallelism,
) -> Result<Pilot, AbcError> {
    let scorer = Scorer::new(ds, predictor, prior, cfg)?;
    let distances: Vec<f64> = scorer
        .score_range(Phase::Pilot, 0..cfg.n_pilot as u64, par)?
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    if prior.is_point() && distances.iter().all(|&d| d == distances[0]) {
        return Err(AbcError::DegeneratePrior);
    }
    let epsilon = stats::quantile(&distances, cfg.zeta)?;
    log::info!("pilot: {} draws, epsilon = {epsilon:.5}", distances.len());
    Ok(Pilot { epsilon, distances })
}

pub fn main_phase<P: NoxPredictor + ?Sized>(
    ds: &EngineDataset,
    predictor: &P,
    prior: &PriorSpec,
    cfg: &AbcConfig,
    epsilon: f64,
    par: Parallelism,
) -> Result<PosteriorSampleSet, AbcError> {
    if epsilon.is_nan() {
        return Err(AbcError::InvalidConfig("epsilon is NaN".into()));
    }
    let scorer = Scorer::new(ds, predictor, prior, cfg)?;
    let mut samples = Vec::new();
    let mut distances = Vec::new();
    let mut draw_indices = Vec::new();
    let mut attempted = 0usize;
    let total = cfg.n_main as u64;
    let mut start = 0u64;
    'outer: while start < total {
        let end = (start + BATCH as u64).min(total);
        let batch = scorer.score_range(Phase::Main, start..end, par)?;
        for (offset, (theta, d)) in batch.into_iter().enumerate() {
            attempted += 1;
            if d <= epsilon {
                samples.push(theta);
                distances.push(d);
                draw_indices.push(start + offset as u64);
                if samples.len() >= cfg.n_desired {
                    break 'outer;
                }
            }
        }
        start = end;
    }
    if samples.is_empty() {
        return Err(AbcError::NoSamplesAccepted { epsilon, attempted });
    }
    let acceptance_rate = samples.len() as f64 / attempted as f64;
    log::info!(
        "main: accepted {} of {attempted} draws (rate {acceptance_rate:.4})",
        samples.len()
    );
    Ok(PosteriorSampleSet {
        engine_id: ds.engine_id.clone(),
        epsilon,
        acceptance_rate,
        attempted,
        samples,
        distances,
        draw_indices,
        prior: prior.clone(),
        config: cfg.clone(),
        provenance: Provenance {
            seed: cfg.seed,
            ..Provenance::default()
        },
    })
}

/// Pilot then main phase.
pub fn calibrate<P: NoxPredictor + ?Sized>(
    ds: &EngineDataset,
    predictor: &P,
    prior: &PriorSpec,
    cfg: &AbcConfig,
    par: Parallelism,
) -> Result<PosteriorSampleSet, AbcError> {
    let pilot = pilot_phase(ds, predictor, prior, cfg, par)?;
    main_phase(ds, predictor, prior, cfg, pilot.epsilon, par)
}

/// Posterior-predictive trajectories and their per-step summary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveEnsemble {
    /// Window-end time of each step.
    pub time: Vec<f64>,
    pub observed: Vec<f64>,
    /// One trajectory per accepted sample.
    pub samples: Vec<Vec<f64>>,
    pub median: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

impl PredictiveEnsemble {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Writes `time_s, median, lo95, hi95, observed`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<(), AbcError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time_s", "median", "lo95", "hi95", "observed"])?;
        for t in 0..self.len() {
            w.write_record(
                [self.time[t], self.median[t], self.lo95[t], self.hi95[t], self.observed[t]]
                    .iter()
                    .map(f64::to_string),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn posterior_predictive<P: NoxPredictor + ?Sized>(
    set: &PosteriorSampleSet,
    ds_new: &EngineDataset,
    predictor: &P,
    sigma_y: f64,
    seed: u64,
    par: Parallelism,
) -> Result<PredictiveEnsemble, AbcError> {
    if set.samples.is_empty() {
        return Err(AbcError::EmptyPosterior);
    }
    let sel = ds_new.selection();
    let run = |(i, theta): (usize, &BiasParameters)| {
        let mut rng = substream(seed, Phase::Predictive, i as u64);
        simulate_inputs(theta, ds_new.inputs(), &sel, predictor, sigma_y, &mut rng)
    };
    let samples: Vec<Vec<f64>> = match par {
        Parallelism::Sequential => set.samples.iter().enumerate().map(run).collect::<Result<_, _>>()?,
        Parallelism::Parallel => set.samples.par_iter().enumerate().map(run).collect::<Result<_, _>>()?,
    };
    let w = predictor.window();
    let steps = samples[0].len();
    let mut median = Vec::with_capacity(steps);
    let mut lo95 = Vec::with_capacity(steps);
    let mut hi95 = Vec::with_capacity(steps);
    let mut col = vec![0.0; samples.len()];
    for t in 0..steps {
        for (c, s) in col.iter_mut().zip(&samples) {
            *c = s[t];
        }
        col.sort_by(f64::total_cmp);
        lo95.push(stats::quantile_sorted(&col, 0.025));
        median.push(stats::quantile_sorted(&col, 0.5));
        hi95.push(stats::quantile_sorted(&col, 0.975));
    }
    Ok(PredictiveEnsemble {
        time: ds_new.time()[w - 1..].to_vec(),
        observed: observed_series(ds_new, w)?.to_vec(),
        samples,
        median,
        lo95,
        hi95,
    })
}

/// Headline metrics of a predictive ensemble against observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse: f64,
    pub p90: f64,
    pub p95: f64,
    pub p98: f64,
    pub coverage95: f64,
}

/// Running totals over time, rectangle rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeSeries {
    pub time: Vec<f64>,
    pub median: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
    pub observed: Vec<f64>,
}

impl CumulativeSeries {
    pub fn write_csv(&self, path: &Path) -> Result<(), AbcError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time_s", "median", "lo95", "hi95", "observed"])?;
        for t in 0..self.time.len() {
            w.write_record(
                [self.time[t], self.median[t], self.lo95[t], self.hi95[t], self.observed[t]]
                    .iter()
                    .map(f64::to_string),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores the ensemble median and band against `y_obs`.
pub fn evaluate(ens: &PredictiveEnsemble, y_obs: &[f64]) -> Result<(EvaluationReport, CumulativeSeries), AbcError> {
    let n = ens.median.len();
    if y_obs.len() != n {
        return Err(AbcError::DimensionMismatch {
            expected: n,
            actual: y_obs.len(),
        });
    }
    let errors = ErrorSummary::compute(y_obs, &ens.median)?;
    let report = EvaluationReport {
        rmse: errors.rmse,
        p90: errors.p90,
        p95: errors.p95,
        p98: errors.p98,
        coverage95: stats::coverage(y_obs, &ens.lo95, &ens.hi95)?,
    };
    let dt = if n >= 2 { ens.time[1] - ens.time[0] } else { 1.0 };
    let cumulative = CumulativeSeries {
        time: ens.time.clone(),
        median: stats::cumulative_series(&ens.median, dt)?,
        lo95: stats::cumulative_series(&ens.lo95, dt)?,
        hi95: stats::cumulative_series(&ens.hi95, dt)?,
        observed: stats::cumulative_series(y_obs, dt)?,
    };
    Ok((report, cumulative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, CycleKind, SynthConfig, TrueResponse};

    fn engine(seed: u64, alpha: f64, b: Vec<f64>, secs: f64) -> EngineDataset {
        let cfg = SynthConfig::new(CycleKind::TransientLike, secs, seed).with_bias(alpha, b);
        synth::generate_sample_engine(&cfg).unwrap()
    }

    fn prior() -> PriorSpec {
        PriorSpec {
            alpha_bounds: (-80.0, 80.0),
            b_bounds: vec![(-1.5, 1.5), (-15.0, 15.0)],
        }
    }

    fn small_cfg() -> AbcConfig {
        AbcConfig {
            n_pilot: 200,
            n_main: 1000,
            n_desired: 1000,
            zeta: 0.1,
            sigma_y: 8.0,
            seed: 17,
        }
    }

    #[test]
    fn identity_parameters_reproduce_the_model() {
        let ds = engine(1, 0.0, vec![0.0, 0.0], 200.0);
        let mut rng = substream(0, Phase::Main, 0);
        let base = baseline_trajectory(&ds, &TrueResponse).unwrap();
        let sim = simulate_trajectory(&BiasParameters::zero(2), &ds, &TrueResponse, 0.0, &mut rng).unwrap();
        assert_eq!(sim, base);
        let shifted = BiasParameters {
            alpha: 12.5,
            b: vec![0.0, 0.0],
        };
        let sim = simulate_trajectory(&shifted, &ds, &TrueResponse, 0.0, &mut rng).unwrap();
        for (s, b) in sim.iter().zip(&base) {
            assert_eq!(*s, b + 12.5);
        }
        assert_eq!(sim.len(), ds.len() - synth::HISTORY + 1);
    }

    #[test]
    fn simulation_is_repeatable() {
        let ds = engine(2, 0.0, vec![0.0, 0.0], 200.0);
        let theta = BiasParameters {
            alpha: 3.0,
            b: vec![0.2, -1.0],
        };
        let a = simulate_trajectory(&theta, &ds, &TrueResponse, 5.0, &mut substream(4, Phase::Main, 9)).unwrap();
        let b = simulate_trajectory(&theta, &ds, &TrueResponse, 5.0, &mut substream(4, Phase::Main, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_is_the_pilot_quantile() {
        let ds = engine(3, 20.0, vec![0.5, 5.0], 250.0);
        let cfg = small_cfg();
        let pilot = pilot_phase(&ds, &TrueResponse, &prior(), &cfg, Parallelism::Parallel).unwrap();
        assert_eq!(pilot.distances.len(), cfg.n_pilot);
        let mut sorted = pilot.distances.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = cfg.zeta * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let oracle = sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (pos - lo as f64);
        assert_eq!(pilot.epsilon.to_bits(), oracle.to_bits());
    }

    #[test]
    fn ten_distances_example() {
        let d: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((stats::quantile(&d, 0.05).unwrap() - 0.145).abs() < 1e-12);
    }

    #[test]
    fn vacuous_tolerance_accepts_the_first_draws() {
        let ds = engine(4, 0.0, vec![0.0, 0.0], 150.0);
        let cfg = AbcConfig {
            n_desired: 50,
            ..small_cfg()
        };
        let set = main_phase(&ds, &TrueResponse, &prior(), &cfg, 1.0, Parallelism::Parallel).unwrap();
        assert_eq!(set.len(), 50);
        assert_eq!(set.attempted, 50);
        assert_eq!(set.draw_indices, (0..50).collect::<Vec<_>>());
        assert_eq!(set.acceptance_rate, 1.0);
    }

    #[test]
    fn impossible_tolerance_is_an_error() {
        let ds = engine(5, 0.0, vec![0.0, 0.0], 150.0);
        let cfg = AbcConfig {
            n_main: 100,
            n_desired: 10,
            ..small_cfg()
        };
        let err = main_phase(&ds, &TrueResponse, &prior(), &cfg, -1.0, Parallelism::Sequential).unwrap_err();
        assert!(matches!(err, AbcError::NoSamplesAccepted { attempted: 100, .. }));
    }

    #[test]
    fn point_prior_without_noise_is_degenerate() {
        let ds = engine(6, 0.0, vec![0.0, 0.0], 150.0);
        let point = PriorSpec {
            alpha_bounds: (1.0, 1.0),
            b_bounds: vec![(0.0, 0.0), (2.0, 2.0)],
        };
        let cfg = AbcConfig {
            sigma_y: 0.0,
            ..small_cfg()
        };
        assert!(matches!(
            pilot_phase(&ds, &TrueResponse, &point, &cfg, Parallelism::Sequential),
            Err(AbcError::DegeneratePrior)
        ));
        // with observation noise the distances jitter and a tolerance exists
        let cfg = AbcConfig {
            sigma_y: 8.0,
            ..cfg
        };
        let pilot = pilot_phase(&ds, &TrueResponse, &point, &cfg, Parallelism::Sequential).unwrap();
        assert!(pilot.epsilon > 0.0);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let ds = engine(7, 0.0, vec![0.0, 0.0], 150.0);
        let mut p = prior();
        p.alpha_bounds = (1.0, -1.0);
        assert!(matches!(
            pilot_phase(&ds, &TrueResponse, &p, &small_cfg(), Parallelism::Sequential),
            Err(AbcError::InvalidPrior(_))
        ));
        let p = PriorSpec {
            alpha_bounds: (0.0, 1.0),
            b_bounds: vec![(0.0, 1.0)],
        };
        assert!(matches!(
            pilot_phase(&ds, &TrueResponse, &p, &small_cfg(), Parallelism::Sequential),
            Err(AbcError::InvalidPrior(_))
        ));
        for cfg in [
            AbcConfig { zeta: 0.0, ..small_cfg() },
            AbcConfig { zeta: 1.0, ..small_cfg() },
            AbcConfig { n_desired: 2000, ..small_cfg() },
            AbcConfig { sigma_y: -1.0, ..small_cfg() },
        ] {
            assert!(matches!(cfg.validate(), Err(AbcError::InvalidConfig(_))));
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let ds = engine(8, 30.0, vec![-0.6, 7.0], 250.0);
        let cfg = AbcConfig {
            n_main: 600,
            n_desired: 40,
            ..small_cfg()
        };
        let a = calibrate(&ds, &TrueResponse, &prior(), &cfg, Parallelism::Sequential).unwrap();
        let b = calibrate(&ds, &TrueResponse, &prior(), &cfg, Parallelism::Parallel).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn larger_tolerance_accepts_a_superset() {
        let ds = engine(9, 30.0, vec![-0.6, 7.0], 250.0);
        let cfg = small_cfg();
        let pilot = pilot_phase(&ds, &TrueResponse, &prior(), &cfg, Parallelism::Parallel).unwrap();
        let mut sorted = pilot.distances.clone();
        sorted.sort_by(f64::total_cmp);
        let mut prev: Option<Vec<u64>> = None;
        let mut medians = Vec::new();
        for q in [0.05, 0.2, 0.5] {
            let eps = stats::quantile_sorted(&sorted, q);
            let set = main_phase(&ds, &TrueResponse, &prior(), &cfg, eps, Parallelism::Parallel).unwrap();
            assert!(set.distances.iter().all(|&d| d <= eps));
            if let Some(p) = &prev {
                assert!(p.iter().all(|i| set.draw_indices.contains(i)));
            }
            medians.push(stats::quantile(&set.distances, 0.5).unwrap());
            prev = Some(set.draw_indices);
        }
        // accepted distances shrink with the tolerance
        assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
    }

    #[test]
    fn posterior_concentrates_near_truth_with_exact_model() {
        let truth = BiasParameters {
            alpha: 35.0,
            b: vec![0.9, -8.0],
        };
        let ds = engine(10, truth.alpha, truth.b.clone(), 400.0);
        let (cal, _) = crate::data::slice_calibration_window(&ds, 80.0, 200.0).unwrap();
        let cfg = AbcConfig {
            n_pilot: 500,
            n_main: 4000,
            n_desired: 200,
            zeta: 0.05,
            sigma_y: 8.0,
            seed: 3,
        };
        let set = calibrate(&cal, &TrueResponse, &prior(), &cfg, Parallelism::Parallel).unwrap();
        let med = set.median().unwrap();
        assert!((med.alpha - truth.alpha).abs() <= 0.1 * 160.0, "{med:?}");
    }

    #[test]
    fn one_sample_without_noise_has_zero_band() {
        let ds = engine(11, 0.0, vec![0.0, 0.0], 120.0);
        let set = PosteriorSampleSet {
            engine_id: "e".into(),
            epsilon: 1.0,
            acceptance_rate: 1.0,
            attempted: 1,
            samples: vec![BiasParameters {
                alpha: 4.0,
                b: vec![0.1, 1.0],
            }],
            distances: vec![0.2],
            draw_indices: vec![0],
            prior: prior(),
            config: small_cfg(),
            provenance: Provenance::default(),
        };
        let ens = posterior_predictive(&set, &ds, &TrueResponse, 0.0, 1, Parallelism::Parallel).unwrap();
        assert_eq!(ens.samples.len(), 1);
        assert_eq!(ens.lo95, ens.hi95);
        assert_eq!(ens.median, ens.samples[0]);
        let (report, cum) = evaluate(&ens, &ens.median.clone()).unwrap();
        assert_eq!(report.rmse, 0.0);
        assert_eq!(report.coverage95, 1.0);
        assert_eq!(cum.median, cum.observed);
    }

    #[test]
    fn identical_samples_give_noise_only_band() {
        let ds = engine(12, 0.0, vec![0.0, 0.0], 300.0);
        let theta = BiasParameters {
            alpha: 0.0,
            b: vec![0.0, 0.0],
        };
        let set = PosteriorSampleSet {
            engine_id: "e".into(),
            epsilon: 1.0,
            acceptance_rate: 1.0,
            attempted: 500,
            samples: vec![theta; 500],
            distances: vec![0.0; 500],
            draw_indices: (0..500).collect(),
            prior: prior(),
            config: small_cfg(),
            provenance: Provenance::default(),
        };
        let sigma = 10.0;
        let ens = posterior_predictive(&set, &ds, &TrueResponse, sigma, 2, Parallelism::Parallel).unwrap();
        let z = crate::normal::quantile(0.975);
        let half: Vec<f64> = ens.hi95.iter().zip(&ens.lo95).map(|(h, l)| 0.5 * (h - l)).collect();
        let mean_half = half.iter().sum::<f64>() / half.len() as f64;
        // averaged over ~300 steps the Monte Carlo error is well under 2 %
        assert!((mean_half / (z * sigma) - 1.0).abs() < 0.02, "{mean_half}");
        for t in 0..ens.len() {
            assert!(ens.lo95[t] <= ens.median[t] && ens.median[t] <= ens.hi95[t]);
        }
    }

    #[test]
    fn empty_posterior_and_length_mismatch() {
        let ds = engine(13, 0.0, vec![0.0, 0.0], 100.0);
        let mut set = PosteriorSampleSet {
            engine_id: "e".into(),
            epsilon: 1.0,
            acceptance_rate: 0.0,
            attempted: 0,
            samples: vec![],
            distances: vec![],
            draw_indices: vec![],
            prior: prior(),
            config: small_cfg(),
            provenance: Provenance::default(),
        };
        assert!(matches!(
            posterior_predictive(&set, &ds, &TrueResponse, 1.0, 0, Parallelism::Parallel),
            Err(AbcError::EmptyPosterior)
        ));
        set.samples.push(BiasParameters::zero(2));
        let ens = posterior_predictive(&set, &ds, &TrueResponse, 1.0, 0, Parallelism::Parallel).unwrap();
        assert!(matches!(evaluate(&ens, &[1.0]), Err(AbcError::DimensionMismatch { .. })));
        let wide = PredictiveEnsemble {
            lo95: vec![f64::NEG_INFINITY; ens.len()],
            hi95: vec![f64::INFINITY; ens.len()],
            ..ens.clone()
        };
        assert_eq!(evaluate(&wide, &ens.observed).unwrap().0.coverage95, 1.0);
    }

    #[test]
    fn marginal_summary_rows() {
        let set = PosteriorSampleSet {
            engine_id: "e".into(),
            epsilon: 1.0,
            acceptance_rate: 1.0,
            attempted: 3,
            samples: (0..3)
                .map(|i| BiasParameters {
                    alpha: i as f64,
                    b: vec![0.0, 1.0],
                })
                .collect(),
            distances: vec![0.0; 3],
            draw_indices: vec![0, 1, 2],
            prior: prior(),
            config: small_cfg(),
            provenance: Provenance::default(),
        };
        let rows = marginal_summary(&set, &["o2".into(), "temp".into()]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].posterior_median, 1.0);
        assert_eq!(rows[0].prior_median, 0.0);
        assert_eq!(rows[2].parameter, "b_temp");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn accepted_sets_respect_their_invariants(
                seed in any::<u64>(),
                n_desired in 1usize..80,
                q in 0.02f64..0.9,
                lo in 0.01f64..0.5,
            ) {
                let ds = engine(seed % 1000, 25.0, vec![0.4, -6.0], 150.0);
                let cfg = AbcConfig {
                    n_pilot: 100,
                    n_main: 300,
                    n_desired,
                    zeta: q,
                    sigma_y: 8.0,
                    seed,
                };
                let p = prior();
                let pilot = pilot_phase(&ds, &TrueResponse, &p, &cfg, Parallelism::Parallel).unwrap();
                let small = match main_phase(&ds, &TrueResponse, &p, &cfg, pilot.epsilon * lo, Parallelism::Parallel) {
                    Ok(set) => Some(set),
                    Err(AbcError::NoSamplesAccepted { .. }) => None,
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                };
                let full = AbcConfig { n_desired: cfg.n_main, ..cfg.clone() };
                let big = main_phase(&ds, &TrueResponse, &p, &full, pilot.epsilon, Parallelism::Parallel).unwrap();

                for set in small.iter().chain([&big]) {
                    prop_assert!(set.distances.iter().all(|&d| d <= set.epsilon));
                    prop_assert!(set.len() <= set.config.n_desired);
                    prop_assert!(set.draw_indices.windows(2).all(|w| w[0] < w[1]));
                    for s in &set.samples {
                        prop_assert!(p.alpha_bounds.0 <= s.alpha && s.alpha <= p.alpha_bounds.1);
                        for (b, (l, h)) in s.b.iter().zip(&p.b_bounds) {
                            prop_assert!(l <= b && b <= h);
                        }
                    }
                }
                // the smaller tolerance accepts a subset of the larger one's draws
                if let Some(small) = &small {
                    prop_assert!(small.draw_indices.iter().all(|i| big.draw_indices.contains(i)));
                }

                let ens = posterior_predictive(&big, &ds, &TrueResponse, 8.0, seed, Parallelism::Parallel).unwrap();
                for t in 0..ens.len() {
                    prop_assert!(ens.lo95[t] <= ens.median[t] && ens.median[t] <= ens.hi95[t]);
                }
            }
        }
    }
}
