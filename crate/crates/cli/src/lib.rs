//! Command-line pipeline: simulate, train, calibrate, predict, evaluate.

pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xcal_core::abc::Parallelism;

pub use commands::Slice;
pub use config::{Loaded, RunConfig};
pub use error::CliError;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "XCAL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "xcal", version, about = "Per-engine bias calibration of a GP NOx model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic nominal and sample-engine datasets plus ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the nominal GP and save the model artifact.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training datasets (default: the simulated nominal training cycles).
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Nominal datasets for the validation residuals in the train report.
        #[arg(long)]
        validate: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer biases from the calibration window of one engine dataset.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Fixed tolerance; skips the pilot phase.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior-predictive NOx band for a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Slice::Holdout)]
        slice: Slice,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction CSV against observations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Sizes the global rayon pool from `XCAL_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a second call in the same process finds the pool already built
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

// stdout may be a closed pipe (`xcal ... | head -1`); losing a status line
// is not an error
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let par = Parallelism::Parallel;
    match cli.command {
        Command::Simulate { common } => {
            let l = Loaded::read(&common.config, common.seed)?;
            for p in commands::simulate(&l)? {
                say!("{}", p.display());
            }
        }
        Command::Train {
            common,
            data,
            validate,
            out,
        } => {
            let l = Loaded::read(&common.config, common.seed)?;
            let t = commands::train(&l, &data, &validate, out.as_deref())?;
            for v in &t.report.validation {
                say!("validation {}: rmse {:.4}", v.dataset, v.rmse);
            }
            say!("{}", t.model_path.display());
            say!("{}", t.report_path.display());
        }
        Command::Calibrate {
            common,
            model,
            data,
            epsilon,
            out,
        } => {
            let l = Loaded::read(&common.config, common.seed)?;
            let model = model.unwrap_or_else(|| l.model_path());
            let c = commands::calibrate(&l, &model, &data, epsilon, out.as_deref(), par)?;
            say!(
                "accepted {} of {} draws at epsilon {}",
                c.posterior.len(),
                c.posterior.attempted,
                c.posterior.epsilon
            );
            say!("{}", c.posterior_path.display());
            say!("{}", c.marginals_path.display());
        }
        Command::Predict {
            common,
            model,
            posterior,
            data,
            slice,
            out,
        } => {
            let l = Loaded::read(&common.config, common.seed)?;
            let model = model.unwrap_or_else(|| l.model_path());
            let p = commands::predict(&l, &model, &posterior, &data, slice, out.as_deref(), par)?;
            say!("{}", p.path.display());
        }
        Command::Evaluate {
            common,
            predictions,
            data,
            out_dir,
        } => {
            let l = Loaded::read(&common.config, common.seed)?;
            let e = commands::evaluate(&l, &predictions, &data, out_dir.as_deref())?;
            let r = &e.report;
            say!(
                "rmse {:.4} (baseline {:.4}, ratio {:.3}), coverage95 {:.3}",
                r.calibrated.rmse, r.baseline.rmse, r.rmse_ratio, r.calibrated.coverage95
            );
            say!("{}", e.report_path.display());
            say!("{}", e.cumulative_path.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
