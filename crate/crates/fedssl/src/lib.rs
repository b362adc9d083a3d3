//! Experiment harness around `fedssl-core`: TOML configuration, dataset
//! assembly (synthetic or IDX files), deterministic CSV metrics, model
//! checkpoints, and sweep/ablation drivers. The `fedssl` binary is a thin
//! CLI over this library.

use std::io;

use thiserror::Error;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod gradcheck;
pub mod idx;
pub mod metrics;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, run_in_memory, run_sweep};

/// Top-level error; `exit_code` maps it onto the CLI contract
/// (1 = configuration/IO problem, 2 = numeric abort).
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Data(#[from] fedssl_core::data::DataError),
    #[error(transparent)]
    Nn(#[from] fedssl_core::nn::NnError),
    #[error(transparent)]
    Fed(#[from] fedssl_core::fed::FedError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("gradient check failed: max relative error {max:.3e} exceeds 1e-4")]
    GradcheckFailed { max: f64 },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use fedssl_core::nn::NnError;
        match self {
            HarnessError::Fed(e) if e.is_numeric() => 2,
            HarnessError::Nn(NnError::NonFiniteGradient { .. } | NnError::NonFiniteParams { .. }) => 2,
            HarnessError::GradcheckFailed { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        HarnessError::Io { context: context.into(), source }
    }
}
