//! Run configuration, training and evaluation loops, metrics, checkpoints.

pub mod config;
pub mod eval;
pub mod frames;
pub mod metrics;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::algos::AlgoError;
use crate::env::EnvError;
use crate::nn::NnError;

pub use config::{RunConfig, OUT_ENV};
pub use eval::{evaluate, evaluate_with, EvalPolicy, EvalReport};
pub use frames::{dump_schedule, render_frame};
pub use metrics::{MetricsRow, COLUMNS};
pub use train::{episode_seed, load_policy, train, TrainSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("checkpoint does not match config: {0}")]
    SpecMismatch(String),
    #[error("training diverged: {message}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    NonFinite { message: String, last_good: Option<PathBuf> },
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("network: {0}")]
    Nn(NnError),
    #[error("update: {0}")]
    Algo(AlgoError),
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(_) | NnError::Checkpoint(_) => HarnessError::Io(e.to_string()),
            other => HarnessError::Nn(other),
        }
    }
}

impl From<AlgoError> for HarnessError {
    fn from(e: AlgoError) -> Self {
        match e {
            AlgoError::NonFinite(message) => HarnessError::NonFinite { message, last_good: None },
            AlgoError::Nn(n) => n.into(),
            other => HarnessError::Algo(other),
        }
    }
}

impl HarnessError {
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::SpecMismatch(_) => "spec-mismatch",
            HarnessError::NonFinite { .. } => "non-finite",
            HarnessError::Env(_) | HarnessError::Nn(_) | HarnessError::Algo(_) => "internal",
        }
    }

    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io(_) => 3,
            HarnessError::SpecMismatch(_) => 4,
            HarnessError::NonFinite { .. } => 5,
            HarnessError::Env(_) | HarnessError::Nn(_) | HarnessError::Algo(_) => 1,
        }
    }
}
