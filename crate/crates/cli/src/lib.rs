//! Batch front end for the toy engine: generation, block scans and the
//! masked-transfer experiment, each writing reproducible artifacts.

use std::path::{Path, PathBuf};

pub mod commands;
pub mod config;

pub use commands::{cmd_generate, cmd_scan, cmd_transfer, Outcome};
pub use config::{parse_seeds, RunConfig, Variant};

/// Environment variable consulted when neither `--out` nor `output_dir` is set.
pub const OUT_ENV: &str = "CONCEPTROL_OUT";
pub const DEFAULT_OUT: &str = "conceptrol-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Run(#[from] conceptrol::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io { .. } | CliError::Run(_) => 3,
        }
    }
}

/// `--out`, then the config's `output_dir`, then `$CONCEPTROL_OUT`, then [`DEFAULT_OUT`].
pub fn resolve_output_dir(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
