//! Scenario runner for the `pairsource` simulator.
//!
//! Each invocation runs one scenario and writes a directory holding a
//! snapshot of the config (`config.toml`), a `summary.txt` of `key=value`
//! lines and the scenario's comma-separated tables.

pub mod config;
pub mod scenario;

use std::path::Path;

use pairsource::ErrorKind;
use thiserror::Error;

pub use config::{ExperimentConfig, LoadedConfig, ValidationReport, Violation};
pub use scenario::{run_scenario, RunOptions, Scenario, ScenarioOutput};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_CONVERGENCE: u8 = 5;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PAIRSOURCE_CONFIG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] pairsource::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Input | ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Numerical => EXIT_NUMERICAL,
                ErrorKind::Convergence => EXIT_CONVERGENCE,
            },
        }
    }
}

impl From<ValidationReport> for CliError {
    fn from(r: ValidationReport) -> Self {
        CliError::Config(r.to_string().trim_end().to_string())
    }
}

/// Writes the config snapshot, `summary.txt` and the tables into `dir`.
pub fn write_output(dir: &Path, cfg: &LoadedConfig, out: &ScenarioOutput) -> Result<(), CliError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = vec![
        ("config.toml".to_string(), cfg.text.clone()),
        ("summary.txt".to_string(), out.summary_text()),
    ];
    files.extend(out.files.iter().cloned());
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(io(&path))?;
    }
    Ok(())
}
