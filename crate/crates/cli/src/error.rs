use thiserror::Error;

/// Command failure, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<traitmix::Error> for CliError {
    fn from(e: traitmix::Error) -> Self {
        use traitmix::Error as E;
        match e {
            E::Io(_) | E::Serde(_) | E::Csv(_) => CliError::Io(e.to_string()),
            E::Numeric(msg) => CliError::Numeric(msg),
            E::Config(msg) => CliError::Validation(msg),
            _ => CliError::Validation(e.to_string()),
        }
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
