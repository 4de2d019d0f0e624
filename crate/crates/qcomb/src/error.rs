use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Core(#[from] qcomb_core::Error),
    /// A run that completed but missed a numerical threshold.
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Io { .. } => "io",
            CliError::Core(e) if e.is_numerical() => "numerical",
            CliError::Core(_) => "validation",
            CliError::Threshold(_) => "numerical",
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind() == "numerical" {
            3
        } else {
            2
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}
