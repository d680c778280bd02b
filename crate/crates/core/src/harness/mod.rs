//! Experiment plumbing: configs and bundled presets, the training loop,
//! evaluation metrics, learning-curve files, frame-count sweeps and the
//! gradient-check suite.

mod config;
mod curves;
pub mod gradcheck;
mod metrics;
mod sweep;
mod train;

use std::path::PathBuf;

use crate::data::{DataError, Split};
use crate::models::ModelError;
use crate::nn::NnError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

pub use config::{apply_overrides, DataConfig, ExperimentConfig, Scale, TrainConfig, PRESET_NAMES};
pub use curves::{read_curves, write_curves, CURVES_HEADER};
pub use metrics::{metrics_from_probs, EvalMetrics};
pub use sweep::{select_frames, sweep_frames, SweepReport, SweepRow, DEFAULT_FRAME_COUNTS};
pub use train::{
    assemble_batch, evaluate, evaluate_split, persist_run, train, train_with, Clock, EpisodeRecord, RunMetadata,
    RunResult, TrainOutcome, WallClock,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("unknown preset `{name}`; available: {}", PRESET_NAMES.join(", "))]
    UnknownPreset { name: String },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("training diverged at episode {episode}, batch {batch} (lr {lr}): {detail}")]
    Diverged {
        episode: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, row {row}: {detail}")]
    Csv { path: PathBuf, row: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
