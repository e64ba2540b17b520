use std::path::Path;

use thiserror::Error;
use xcal_core::abc::AbcError;
use xcal_core::data::DataError;
use xcal_core::gp::GpError;
use xcal_core::synth::SynthError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 I/O or artifact, 3 inference,
    /// 4 provenance.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::InvalidConfig(_) => 1,
            CliError::Io { .. } | CliError::Artifact(_) => 2,
            CliError::Inference(_) => 3,
            CliError::Provenance(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSchema(m) => CliError::InvalidConfig(m),
            DataError::NonIntegerWindow(_) | DataError::WindowExceedsCycle { .. } => CliError::InvalidConfig(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::InvalidConfig(m) => CliError::InvalidConfig(m),
            GpError::Data(d) => d.into(),
            GpError::FactorizationFailed | GpError::Transform(_) => CliError::Inference(e.to_string()),
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<AbcError> for CliError {
    fn from(e: AbcError) -> Self {
        match e {
            AbcError::InvalidConfig(m) => CliError::InvalidConfig(m),
            AbcError::InvalidPrior(_) => CliError::InvalidConfig(e.to_string()),
            AbcError::Data(d) => d.into(),
            AbcError::NoSamplesAccepted { .. } | AbcError::EmptyPosterior | AbcError::DegeneratePrior => {
                CliError::Inference(e.to_string())
            }
            other => CliError::Artifact(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Data(d) => d.into(),
            other => CliError::InvalidConfig(other.to_string()),
        }
    }
}
