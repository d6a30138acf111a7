use ratio_forge_core::Error as CoreError;
use thiserror::Error;

/// Exit code for a clean run.
pub const EXIT_OK: u8 = 0;
/// Exit code for runtime failures that are not the caller's fault.
pub const EXIT_FAILURE: u8 = 1;
/// Exit code for bad flags or inputs; matches clap's own usage errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for a training run that halted on a stability event.
pub const EXIT_HALT: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("training halted: {0}")]
    Halted(String),

    #[error("{0}")]
    Io(String),

    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Halted(_) => EXIT_HALT,
            CliError::Io(_) => EXIT_FAILURE,
            CliError::Core(e) => match e {
                CoreError::Io(_) => EXIT_FAILURE,
                CoreError::NonFinite(_) => EXIT_HALT,
                _ => EXIT_USAGE,
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
