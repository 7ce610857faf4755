//! The three training phases, checkpoints, and the commands behind the `asgk`
//! binary.
//!
//! Phase one pretrains the GRU sentence encoder, graph encoder and decoder by
//! autoencoding textbook sentences. Phase two trains the global and region
//! backbones with their tag heads. Phase three trains everything jointly,
//! feeding the graph encoder `f_f` (or `f_g` without the internal signal).

mod checkpoint;
pub mod commands;
mod config;
mod model;
mod train;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{fnv1a64, Checkpoint, CheckpointError, Record};
pub use config::TrainConfig;
pub use model::{build_vocabulary, Group, Model, Snapshot};
pub use train::{
    branch_loss, evaluate_split, init_joint, predict, pretrain, restore_best, run_all, run_backbone, run_joint, run_pretrain,
    train_backbone, train_joint, EpochHook, PhaseState, Predictions, RunOutcome,
};

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("input error: {0}")]
    Input(String),
    #[error("alignment error: missing {missing:?}, unexpected {unexpected:?}")]
    Alignment { missing: Vec<String>, unexpected: Vec<String> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("model error: {0}")]
    Model(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 3 for bad input
    /// data or artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Data(DataError::Config(_)) => 2,
            Self::Data(_) | Self::Input(_) | Self::Alignment { .. } | Self::Checkpoint(_) | Self::Metric(_) => 3,
            Self::Model(_) | Self::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Backbone,
    Train,
}

impl Phase {
    /// Salt mixed into the seed for batch order.
    fn salt(self) -> u64 {
        match self {
            Self::Pretrain => 0x5e17,
            Self::Backbone => 0xbac0,
            Self::Train => 0x7a1e,
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: BTreeMap<String, f64>,
    pub val: BTreeMap<String, f64>,
    pub lr: BTreeMap<String, f64>,
    /// Parameter groups that received a non-zero gradient this epoch.
    pub moved: Vec<String>,
}

pub fn append_log(path: &Path, entry: &EpochLog) -> Result<(), PipelineError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PipelineError::io(path, e))?;
    let line = serde_json::to_string(entry).expect("log entries serialise");
    writeln!(f, "{line}").map_err(|e| PipelineError::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display()))))
        .collect()
}
