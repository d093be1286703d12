use std::path::Path;

use vim_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Training(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Training(_) => "training",
            CliError::Io(_) => "io",
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } => CliError::Io(msg),
            Error::InvalidConfig(_) | Error::UnsupportedTask(_) => CliError::Usage(msg),
            Error::Validation(_)
            | Error::InvalidGeometry(_)
            | Error::NotFinalized
            | Error::Truncated { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Checksum { .. }
            | Error::Malformed(_) => CliError::Validation(msg),
            Error::FrozenViolation { .. }
            | Error::Divergence { .. }
            | Error::ShapeMismatch { .. }
            | Error::DeltaShape { .. }
            | Error::MissingSummary => CliError::Training(msg),
        }
    }
}
