//! Config ingestion, single runs, sweeps and the files they leave behind.

mod config;
mod run;
mod sweep;

pub use config::{
    ConfigError, DriftScript, Manifest, ModelSection, OutputSection, RunSection, SimConfig, SweepSection,
    TrafficSection, SCHEMA_VERSION,
};
pub use run::{build_world, run_to_dir, simulate, RunOutcome, RunResult, RunSummary};
pub use sweep::{sweep, CellSummary, SweepRun, SweepSummary};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot load config: {0}")]
    Load(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}
