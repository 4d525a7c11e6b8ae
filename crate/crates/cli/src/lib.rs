//! Experiment harness for the perturbation laboratory.
//!
//! This crate wraps the core library in a reproducible pipeline: dataset
//! generation, model training, perturbation optimization, evaluation, and
//! robustness sweeps, all driven by a strict JSON configuration. Every run
//! writes a manifest that fingerprints its inputs and hashes its outputs so
//! identical configurations produce byte-identical artifacts.

pub mod config;
pub mod experiment;
pub mod pools;
pub mod suite;
pub mod sweep;

/// Errors surfaced by the harness, split by exit code.
///
/// Configuration problems (bad JSON, unknown keys, invalid values) map to
/// exit code 2; failures while executing a pipeline stage map to exit code 3.
#[derive(Debug)]
pub enum CliError {
    /// The configuration could not be parsed or failed validation.
    Config(String),
    /// A pipeline stage failed after configuration was accepted.
    Run {
        stage: &'static str,
        source: anydoor_core::Error,
    },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Run { stage, source } => {
                write!(f, "stage '{stage}' failed: {source}")
            }
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Config(_) => None,
            CliError::Run { source, .. } => Some(source),
        }
    }
}

impl CliError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run { .. } => 3,
        }
    }

    /// Wrap a core error as a stage failure.
    pub fn run(stage: &'static str) -> impl FnOnce(anydoor_core::Error) -> CliError {
        move |source| CliError::Run { stage, source }
    }
}

/// Harness result type.
pub type CliResult<T> = std::result::Result<T, CliError>;
