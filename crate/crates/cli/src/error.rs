use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] stemforge_core::Error),

    #[error(transparent)]
    Service(#[from] stemforge_service::ServiceError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {failures} of {checked} entries above {tolerance:e} (worst {max_rel_err:e} at {worst})")]
    Gradcheck {
        failures: usize,
        checked: usize,
        tolerance: f64,
        max_rel_err: f64,
        worst: String,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// The single line printed to stderr when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorLine<'a> {
    pub error: &'static str,
    pub message: &'a str,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        use stemforge_core::Error as E;
        match self {
            Self::Core(E::InvalidConfig(_)) => "invalid_config",
            Self::Core(E::Format(_) | E::Checksum { .. }) => "malformed_file",
            Self::Core(E::Io(_)) | Self::Io { .. } => "io",
            Self::Core(E::Diverged { .. } | E::NonFinite(_)) => "diverged",
            Self::Core(_) => "invalid_input",
            Self::Service(e) => e.code(),
            Self::Usage(_) => "usage",
            Self::Gradcheck { .. } => "tolerance",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Gradcheck { .. } => 3,
            _ => 1,
        }
    }

    pub fn line(&self) -> String {
        let message = self.to_string();
        serde_json::to_string(&ErrorLine {
            error: self.code(),
            message: &message,
        })
        .expect("error line serializes")
    }
}
