use soars_core::CoreError;
use soars_nasnet::NasError;
use soars_stratified::StratError;
use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Io(_) => "io",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() }).to_string()
    }

    pub fn io(path: impl AsRef<std::path::Path>, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.as_ref().display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. } => CliError::Io(e.to_string()),
            CoreError::Split(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NasError> for CliError {
    fn from(e: NasError) -> Self {
        match e {
            NasError::Io { .. } => CliError::Io(e.to_string()),
            NasError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<StratError> for CliError {
    fn from(e: StratError) -> Self {
        match e {
            StratError::Core(c) => c.into(),
            StratError::Nas(n) => n.into(),
            StratError::Io { .. } => CliError::Io(e.to_string()),
            StratError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
