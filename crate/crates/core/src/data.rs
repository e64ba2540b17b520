//! Engine datasets: schema, CSV ingestion, sensor-bias application,
//! lag windowing and calibration/holdout slicing.
//!
//! A dataset is a uniformly sampled record of `d` input channels plus the
//! measured NOx output. Channels are either *control* inputs (commanded by the
//! ECU, assumed exact) or *measured* inputs (read from sensors that may carry a
//! constant offset). Biases only ever touch measured channels.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on the sampling step.
const STEP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("time is not strictly increasing at row {0}")]
    NonMonotoneTime(usize),
    #[error("time step at row {0} differs from the first step")]
    NonUniformStep(usize),
    #[error("time step {step} s does not match the schema sample rate {rate} Hz")]
    SampleRateMismatch { step: f64, rate: f64 },
    #[error("non-finite value at row {row}, column `{column}`")]
    NonFiniteValue { row: usize, column: String },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("window of {0} s is longer than the dataset")]
    WindowTooLong(f64),
    #[error("window of {0} s is not a positive whole number of samples")]
    NonIntegerWindow(f64),
    #[error("warmup {warmup_s} s + calibration {length_s} s leaves no holdout in a {duration_s} s cycle")]
    WindowExceedsCycle {
        warmup_s: f64,
        length_s: f64,
        duration_s: f64,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Control,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub role: ChannelRole,
    #[serde(default)]
    pub units: String,
}

impl ChannelSpec {
    pub fn new(name: impl Into<String>, role: ChannelRole, units: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role,
            units: units.into(),
        }
    }
}

fn default_rate() -> f64 {
    1.0
}

/// Ordered channel list plus the sampling rate every dataset must follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub channels: Vec<ChannelSpec>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
}

impl Schema {
    pub fn new(channels: Vec<ChannelSpec>) -> Result<Self, DataError> {
        let schema = Self {
            channels,
            sample_rate_hz: 1.0,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_sample_rate(mut self, hz: f64) -> Result<Self, DataError> {
        self.sample_rate_hz = hz;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.channels.is_empty() {
            return Err(DataError::InvalidSchema("no channels".into()));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if ch.name == "time_s" || ch.name == "nox" {
                return Err(DataError::InvalidSchema(format!(
                    "`{}` is a reserved column name",
                    ch.name
                )));
            }
            if !seen.insert(ch.name.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate channel `{}`",
                    ch.name
                )));
            }
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(DataError::InvalidSchema(format!(
                "sample rate {} Hz must be positive",
                self.sample_rate_hz
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn selection(&self) -> SelectionMatrix {
        SelectionMatrix::from_mask(
            self.channels
                .iter()
                .map(|c| c.role == ChannelRole::Measured)
                .collect(),
        )
    }

    pub fn measured_names(&self) -> Vec<&str> {
        self.channels
            .iter()
            .filter(|c| c.role == ChannelRole::Measured)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// The 0/1 embedding `S` of measured-channel biases into the full input
/// vector, stored as the measured-channel mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    mask: Vec<bool>,
    measured: Vec<usize>,
}

impl SelectionMatrix {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let measured = mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect();
        Self { mask, measured }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Full input dimension `d`.
    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Number of measured channels `d_nc`.
    pub fn n_measured(&self) -> usize {
        self.measured.len()
    }

    /// Input index of the k-th measured channel.
    pub fn measured_indices(&self) -> &[usize] {
        &self.measured
    }

    /// Entry `S[row, col]` of the explicit d×d_nc matrix.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        if self.measured.get(col) == Some(&row) {
            1.0
        } else {
            0.0
        }
    }

    /// `S b` as a dense length-d vector.
    pub fn embed(&self, b: &[f64]) -> Result<Vec<f64>, DataError> {
        self.check_bias(b)?;
        let mut out = vec![0.0; self.dim()];
        for (&j, &bk) in self.measured.iter().zip(b) {
            out[j] = bk;
        }
        Ok(out)
    }

    fn check_bias(&self, b: &[f64]) -> Result<(), DataError> {
        if b.len() != self.n_measured() {
            return Err(DataError::DimensionMismatch {
                expected: self.n_measured(),
                actual: b.len(),
            });
        }
        Ok(())
    }
}

/// Bias-corrected input `x - S b`.
pub fn apply_bias(x: &[f64], sel: &SelectionMatrix, b: &[f64]) -> Result<Vec<f64>, DataError> {
    if x.len() != sel.dim() {
        return Err(DataError::DimensionMismatch {
            expected: sel.dim(),
            actual: x.len(),
        });
    }
    sel.check_bias(b)?;
    let mut out = x.to_vec();
    for (&j, &bk) in sel.measured.iter().zip(b) {
        out[j] -= bk;
    }
    Ok(out)
}

/// Row-major T×d input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMatrix {
    data: Vec<f64>,
    cols: usize,
}

impl InputMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DataError::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { data, cols })
    }

    pub fn from_flat(data: Vec<f64>, cols: usize) -> Result<Self, DataError> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(DataError::DimensionMismatch {
                expected: cols,
                actual: data.len(),
            });
        }
        Ok(Self { data, cols })
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            cols: self.cols,
        }
    }

    /// Returns a copy with `S b` subtracted from every row.
    pub fn with_bias_removed(&self, sel: &SelectionMatrix, b: &[f64]) -> Result<Self, DataError> {
        if sel.dim() != self.cols {
            return Err(DataError::DimensionMismatch {
                expected: self.cols,
                actual: sel.dim(),
            });
        }
        sel.check_bias(b)?;
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.cols) {
            for (&j, &bk) in sel.measured.iter().zip(b) {
                row[j] -= bk;
            }
        }
        Ok(Self {
            data,
            cols: self.cols,
        })
    }
}

/// One engine on one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineDataset {
    pub engine_id: String,
    pub cycle_id: String,
    schema: Arc<Schema>,
    time: Vec<f64>,
    inputs: InputMatrix,
    nox: Vec<f64>,
}

impl EngineDataset {
    /// Builds and validates a dataset.
    pub fn new(
        engine_id: impl Into<String>,
        cycle_id: impl Into<String>,
        schema: Arc<Schema>,
        time: Vec<f64>,
        inputs: InputMatrix,
        nox: Vec<f64>,
    ) -> Result<Self, DataError> {
        if time.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if inputs.cols() != schema.dim() {
            return Err(DataError::DimensionMismatch {
                expected: schema.dim(),
                actual: inputs.cols(),
            });
        }
        for (actual, expected) in [(inputs.rows(), time.len()), (nox.len(), time.len())] {
            if actual != expected {
                return Err(DataError::DimensionMismatch { expected, actual });
            }
        }
        for (t, row) in inputs.iter_rows().enumerate() {
            if !time[t].is_finite() {
                return Err(DataError::NonFiniteValue {
                    row: t,
                    column: "time_s".into(),
                });
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteValue {
                    row: t,
                    column: schema.channels[j].name.clone(),
                });
            }
            if !nox[t].is_finite() {
                return Err(DataError::NonFiniteValue {
                    row: t,
                    column: "nox".into(),
                });
            }
        }
        validate_time(&time, schema.sample_rate_hz)?;
        Ok(Self {
            engine_id: engine_id.into(),
            cycle_id: cycle_id.into(),
            schema,
            time,
            inputs,
            nox,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn selection(&self) -> SelectionMatrix {
        self.schema.selection()
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn inputs(&self) -> &InputMatrix {
        &self.inputs
    }

    pub fn nox(&self) -> &[f64] {
        &self.nox
    }

    /// Sampling step in seconds.
    pub fn step(&self) -> f64 {
        1.0 / self.schema.sample_rate_hz
    }

    /// Elapsed time between the first and last sample.
    pub fn duration(&self) -> f64 {
        self.time[self.time.len() - 1] - self.time[0]
    }

    /// Window length in samples for a window of `window_s` seconds.
    pub fn window_samples(&self, window_s: f64) -> Result<usize, DataError> {
        window_len(window_s, self.schema.sample_rate_hz)
    }

    pub fn with_ids(mut self, engine_id: impl Into<String>, cycle_id: impl Into<String>) -> Self {
        self.engine_id = engine_id.into();
        self.cycle_id = cycle_id.into();
        self
    }

    /// Same records with replaced inputs (e.g. bias-corrected).
    pub fn with_inputs(&self, inputs: InputMatrix) -> Result<Self, DataError> {
        Self::new(
            self.engine_id.clone(),
            self.cycle_id.clone(),
            self.schema.clone(),
            self.time.clone(),
            inputs,
            self.nox.clone(),
        )
    }

    fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        Self::new(
            self.engine_id.clone(),
            self.cycle_id.clone(),
            self.schema.clone(),
            self.time[start..end].to_vec(),
            self.inputs.slice_rows(start, end),
            self.nox[start..end].to_vec(),
        )
    }
}

fn validate_time(time: &[f64], rate_hz: f64) -> Result<(), DataError> {
    for i in 1..time.len() {
        if time[i] <= time[i - 1] {
            return Err(DataError::NonMonotoneTime(i));
        }
    }
    if time.len() < 2 {
        return Ok(());
    }
    let step = time[1] - time[0];
    for i in 2..time.len() {
        let s = time[i] - time[i - 1];
        if (s - step).abs() > STEP_TOL * step.abs().max(1.0) {
            return Err(DataError::NonUniformStep(i));
        }
    }
    // Average step over the whole record keeps accumulated float error out.
    let mean_step = (time[time.len() - 1] - time[0]) / (time.len() - 1) as f64;
    if (mean_step * rate_hz - 1.0).abs() > 1e-6 {
        return Err(DataError::SampleRateMismatch {
            step: mean_step,
            rate: rate_hz,
        });
    }
    Ok(())
}

fn window_len(window_s: f64, rate_hz: f64) -> Result<usize, DataError> {
    let w = window_s * rate_hz;
    let rounded = w.round();
    if !w.is_finite() || rounded < 1.0 || (w - rounded).abs() > 1e-9 * w.abs().max(1.0) {
        return Err(DataError::NonIntegerWindow(window_s));
    }
    Ok(rounded as usize)
}

/// Reads a CSV with header `time_s, <channels in schema order>, nox`.
///
/// Column order in the file does not matter; the returned inputs follow the
/// schema order. The engine id defaults to the file stem.
pub fn load_dataset(path: &Path, schema: Arc<Schema>) -> Result<EngineDataset, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let time_col = find("time_s")?;
    let nox_col = find("nox")?;
    let channel_cols = schema
        .channels
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>, _>>()?;

    let parse = |rec: &csv::StringRecord, col: usize, row: usize| -> Result<f64, DataError> {
        let bad = || DataError::NonFiniteValue {
            row,
            column: headers.get(col).unwrap_or("?").to_string(),
        };
        let v: f64 = rec.get(col).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad())
        }
    };

    let mut time = Vec::new();
    let mut nox = Vec::new();
    let mut flat = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        time.push(parse(&rec, time_col, row)?);
        for &c in &channel_cols {
            flat.push(parse(&rec, c, row)?);
        }
        nox.push(parse(&rec, nox_col, row)?);
    }
    if time.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let engine_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let inputs = InputMatrix::from_flat(flat, schema.dim())?;
    EngineDataset::new(engine_id, "", schema, time, inputs, nox)
}

/// Writes the dataset in the interchange CSV layout.
pub fn write_dataset(path: &Path, ds: &EngineDataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_s".to_string()];
    header.extend(ds.schema.channels.iter().map(|c| c.name.clone()));
    header.push("nox".into());
    w.write_record(&header)?;
    for t in 0..ds.len() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(ds.time[t].to_string());
        rec.extend(ds.inputs.row(t).iter().map(f64::to_string));
        rec.push(ds.nox[t].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Lag-stacked inputs. Row `k` is `x_k ‖ x_{k+1} ‖ … ‖ x_{k+W-1}` and its
/// target is the NOx sample at the window end, `y_{k+W-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedInputs {
    pub rows: InputMatrix,
    pub targets: Vec<f64>,
    pub window: usize,
    /// Channel count of the un-windowed input.
    pub channels: usize,
}

impl WindowedInputs {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Concatenates several windowed sets of identical layout.
    pub fn concat(parts: &[WindowedInputs]) -> Result<Self, DataError> {
        let first = parts.first().ok_or(DataError::EmptyDataset)?;
        let mut flat = Vec::new();
        let mut targets = Vec::new();
        for p in parts {
            if p.window != first.window || p.channels != first.channels {
                return Err(DataError::DimensionMismatch {
                    expected: first.rows.cols(),
                    actual: p.rows.cols(),
                });
            }
            flat.extend_from_slice(p.rows.as_slice());
            targets.extend_from_slice(&p.targets);
        }
        Ok(Self {
            rows: InputMatrix::from_flat(flat, first.rows.cols())?,
            targets,
            window: first.window,
            channels: first.channels,
        })
    }
}

/// Stacks `window` consecutive rows of a T×d matrix into (T-W+1)×(d·W).
pub fn window_matrix(inputs: &InputMatrix, window: usize) -> Result<InputMatrix, DataError> {
    let t = inputs.rows();
    if window == 0 {
        return Err(DataError::NonIntegerWindow(0.0));
    }
    if window > t {
        return Err(DataError::WindowTooLong(window as f64));
    }
    let d = inputs.cols();
    let n = t - window + 1;
    let mut flat = Vec::with_capacity(n * d * window);
    for k in 0..n {
        // consecutive rows are contiguous in row-major storage
        flat.extend_from_slice(&inputs.as_slice()[k * d..(k + window) * d]);
    }
    InputMatrix::from_flat(flat, d * window)
}

pub fn window_inputs(ds: &EngineDataset, window_s: f64) -> Result<WindowedInputs, DataError> {
    let w = ds.window_samples(window_s)?;
    if w > ds.len() {
        return Err(DataError::WindowTooLong(window_s));
    }
    Ok(WindowedInputs {
        rows: window_matrix(&ds.inputs, w)?,
        targets: ds.nox[w - 1..].to_vec(),
        window: w,
        channels: ds.schema.dim(),
    })
}

/// Splits a cycle into warmup `[t0, t0+warmup]`, calibration
/// `(t0+warmup, t0+warmup+length]` and holdout (everything after).
/// Warmup samples are dropped.
pub fn slice_calibration_window(
    ds: &EngineDataset,
    warmup_s: f64,
    length_s: f64,
) -> Result<(EngineDataset, EngineDataset), DataError> {
    let duration = ds.duration();
    let exceeds = || DataError::WindowExceedsCycle {
        warmup_s,
        length_s,
        duration_s: duration,
    };
    if !(warmup_s >= 0.0 && length_s > 0.0) || warmup_s + length_s >= duration {
        return Err(exceeds());
    }
    let t0 = ds.time[0];
    let tol = 1e-9 * ds.step();
    let rel = |t: f64| t - t0;
    let cal_start = ds.time.partition_point(|&t| rel(t) <= warmup_s + tol);
    let cal_end = ds
        .time
        .partition_point(|&t| rel(t) <= warmup_s + length_s + tol);
    if cal_start >= cal_end || cal_end >= ds.len() {
        return Err(exceeds());
    }
    Ok((ds.slice(cal_start, cal_end)?, ds.slice(cal_end, ds.len())?))
}
