use mfgflow::oracle::OracleError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] mfgflow::Error),

    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    Failed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 0 ok, 2 config, 3 numerical divergence, 4 infeasible oracle input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if matches!(e, mfgflow::Error::Config(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Diverged(_) => 3,
            CliError::Oracle(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
