//! Library side of the `vibcorr` command: configuration, task runners,
//! parameter scans and plotting.

pub mod config;
pub mod plot;
pub mod scan;
pub mod tasks;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] vibcorr::Error),
    #[error("oracle suite failed: {0}")]
    Oracle(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scan cell {cell} failed: {source}")]
    Scan { cell: String, source: Box<CliError> },
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// instability, 4 for a failed oracle suite, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(vibcorr::Error::InvalidParameter { .. } | vibcorr::Error::HierarchyTooLarge { .. }) => 2,
            CliError::Core(vibcorr::Error::Instability { .. }) => 3,
            CliError::Oracle(_) => 4,
            CliError::Scan { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
