use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] diffreg::Error),
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    #[error("cannot parse {}: {message}", path.display())]
    DatasetParse { path: PathBuf, message: String },
    #[error("io error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl CliError {
    /// Variant name used in the machine-readable error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::ConfigParse(_) => "ConfigParse",
            CliError::DatasetNotFound(_) => "DatasetNotFound",
            CliError::DatasetParse { .. } => "DatasetParse",
            CliError::Io { .. } => "Io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            message: e.to_string(),
        }
    }

    /// `{"error": kind, "message": text}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
