use thiserror::Error;

/// A failed command. Usage errors exit with 2, runtime failures with 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Errors from reading user-supplied inputs are usage errors.
pub fn input_error(what: &str, e: paragan_core::Error) -> CliError {
    CliError::usage(format!("{what}: {e}"))
}

pub fn io_error(what: &str, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{what}: {e}"))
}
