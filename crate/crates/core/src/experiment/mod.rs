//! Experiment configuration, orchestration, checkpoints and ablation presets.

mod checkpoint;
mod config;
mod presets;
mod runner;

use std::path::Path;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::data::DataError;
use crate::models::ModelError;
use crate::protocol::ProtocolError;
use crate::transport::TransportError;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    Algorithm, DataConfig, DataSource, EvalConfig, ExperimentConfig, ModelConfig, RunConfig, SplitKind, TrainConfig,
    TransportKind, KEYS,
};
pub use presets::{sweep, Preset, LAMBDA_SHARED_GRID, LAMBDA_THETA_GRID};
pub use runner::{
    analyze_checkpoint, build_dataset, build_networks, build_population, eval_checkpoint, evaluate,
    load_checkpoint_state, predict_cli, run, spec_digest, AnalysisReport, ClientData, ModelState, PredictOutput,
    PredictRequest, RunOutcome, Setup, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        ExperimentError::Io { path: path.display().to_string(), msg: e.to_string() }
    }
}
