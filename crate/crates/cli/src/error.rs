use std::process::ExitCode;

use crackgnn_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    MissingDependency(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::MissingDependency(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(_) | CliError::Io { .. } => 1,
        })
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(msg) => CliError::Config(msg),
            CoreError::Numerical(msg) => CliError::Numerical(msg),
            e @ (CoreError::RankDeficient { .. } | CoreError::ZeroVariance) => CliError::Numerical(e.to_string()),
            e => CliError::Core(e),
        }
    }
}
