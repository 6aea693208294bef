use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) => ExitCode::from(3),
        }
    }
}

impl From<slabpen::Error> for CliError {
    fn from(e: slabpen::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
