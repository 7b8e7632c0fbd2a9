use std::process::ExitCode;

/// Anything that can stop a command, tagged by which exit code it earns.
///
/// The contract: 2 for problems the user can fix by changing flags, config,
/// or data; 3 for failures during estimation or while writing results; 4 for
/// invariant breaches inside the library.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Compute(clusterdr::Error),
    #[error("{0}")]
    Output(String),
    #[error(transparent)]
    Internal(clusterdr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Data(_) => ExitCode::from(2),
            CliError::Compute(_) | CliError::Output(_) => ExitCode::from(3),
            CliError::Internal(_) => ExitCode::from(4),
        }
    }

    /// Classify a library error by whether the caller could have prevented it.
    pub fn from_lib(err: clusterdr::Error) -> Self {
        match err {
            clusterdr::Error::Internal { .. } => CliError::Internal(err),
            clusterdr::Error::InvalidParam { .. } | clusterdr::Error::TooFewClusters { .. } => {
                CliError::Config(format!("{err}"))
            }
            _ => CliError::Compute(err),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
