//! Experiment runner: configuration parsing, run matrices and result files.

pub mod commands;
pub mod matrix;
pub mod results;
pub mod spec;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<cotrain_core::Error> for CliError {
    fn from(e: cotrain_core::Error) -> Self {
        use cotrain_core::Error as E;
        match e {
            E::Config(_) | E::Domain(_) | E::Shape(_) | E::Json(_) => CliError::Config(e.to_string()),
            E::Io(io) => CliError::Io(io.to_string()),
            E::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}
