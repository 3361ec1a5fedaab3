//! Experiment runner for `bsvie-core`: reads an experiment config, runs the
//! requested suites across mesh levels and writes CSV, JSON and a plain-text
//! summary into the output directory.

pub mod config;
pub mod run;

pub use config::{ExperimentConfig, Overrides, Suite};
pub use run::{run, Check, RunOutcome};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BSVIE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerical(#[from] bsvie_core::Error),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) | CliError::Output { .. } => EXIT_NUMERICAL,
        }
    }
}

/// Installs the global thread pool with the size from [`THREADS_ENV`], if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}
