//! Experiment runner for modality-aware mutual learning: config binding and
//! the `synth`, `train`, `eval` and `export-attention` commands.

pub mod commands;
pub mod config;

pub use config::{DataSource, EvalSettings, ExperimentConfig, ModelKind};

use maml_core::Error;

/// Process exit status for an error: 2 configuration, 3 divergence, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Config(_)
        | Error::Shape(_)
        | Error::UnknownModality(_)
        | Error::Empty(_)
        | Error::DataQuality(_)
        | Error::RegistrationRequired { .. } => 2,
    }
}
