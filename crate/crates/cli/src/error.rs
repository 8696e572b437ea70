use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: prunekv_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core {
                source: prunekv_core::Error::Contract(_),
                ..
            } => EXIT_CONTRACT,
            CliError::Core { .. } | CliError::Io { .. } => EXIT_IO,
        }
    }
}

/// Attaches context to core results.
pub(crate) trait CoreContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> std::result::Result<T, CliError>;
}

impl<T> CoreContext<T> for prunekv_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> std::result::Result<T, CliError> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}

impl<T> CoreContext<T> for serde_json::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> std::result::Result<T, CliError> {
        self.map_err(|e| CliError::Core {
            context: what(),
            source: e.into(),
        })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
