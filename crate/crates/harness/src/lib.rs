//! Experiment harness: synthetic heterogeneous video data, training and
//! evaluation loops, ablation runner, loss-landscape slices, and embedding
//! export. The binary target wires these into the `heterovid` CLI.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod export;
pub mod landscape;
pub mod metrics;
pub mod synth;
pub mod train;
pub mod verify;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error(transparent)]
    Engine(#[from] heterovid_core::EngineError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training aborted at {stage}: {reason}")]
    TrainingAborted { stage: String, reason: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
