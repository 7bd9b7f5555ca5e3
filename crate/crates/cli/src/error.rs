use thiserror::Error;

/// Failures reported by the command-line front end, grouped by exit code.
#[derive(Error, Debug)]
pub enum CliError {
    /// Bad configuration or input data (exit code 2).
    #[error("{0}")]
    Input(String),
    /// The numbers did not cooperate (exit code 3).
    #[error("{0}")]
    Numerical(String),
    /// A model document of the wrong format or version (exit code 4).
    #[error("{0}")]
    Compatibility(String),
    /// Writing outputs failed (exit code 2).
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Compatibility(_) => 4,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<affpc::Error> for CliError {
    fn from(e: affpc::Error) -> Self {
        match e {
            affpc::Error::ModelCompatibility(_) => CliError::Compatibility(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
