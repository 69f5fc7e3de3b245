use std::fmt;

use seunet_core::Error;

/// A failed command, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// A check failed or input data was invalid (exit 2).
    Validation(String),
    /// Reading or writing files failed (exit 3).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage error", m),
            CliError::Validation(m) => ("validation error", m),
            CliError::Io(m) => ("i/o error", m),
        };
        // One line, always.
        write!(f, "{kind}: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::MissingFile { .. } | Error::Decode { .. } => CliError::Io(msg),
            Error::InvalidArgument(_) | Error::UnknownVariant(_) => CliError::Usage(msg),
            _ => CliError::Validation(msg),
        }
    }
}
