use bsde_core::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{name}: {0}", name = .0.name())]
    Solver(#[from] LabError),
    /// A run completed but violated its own acceptance threshold.
    #[error("OracleMismatch: {0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) | CliError::Csv(_) => 2,
            CliError::Solver(_) | CliError::Mismatch(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Errors raised while building a tree or an instance from the config are config errors.
pub fn setup<T>(r: bsde_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Config(e.to_string()))
}
