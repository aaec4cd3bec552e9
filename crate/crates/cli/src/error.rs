use retgrade_core::io::IoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or inputs that parse but are not acceptable.
    #[error("{0}")]
    Invalid(String),
    /// Files or sockets that could not be read or written.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn invalid(e: impl ToString) -> Self {
        CliError::Invalid(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<retgrade_core::synth::SynthError> for CliError {
    fn from(e: retgrade_core::synth::SynthError) -> Self {
        match e {
            retgrade_core::synth::SynthError::Io(io) => io.into(),
            other => CliError::invalid(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
