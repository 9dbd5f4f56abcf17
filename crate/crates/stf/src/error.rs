use std::path::{Path, PathBuf};

/// Errors of the IO and command layer. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed or inconsistent input file.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] stf_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 0 ok, 1 usage, 2 data error, 3 check failure.
    pub fn exit_code(&self) -> i32 {
        use stf_core::Error as E;
        match self {
            Self::Usage(_) | Self::Core(E::Config(_) | E::Unsupported(_)) => 1,
            Self::Check(_) => 3,
            Self::Io { .. } | Self::Format { .. } | Self::Core(_) => 2,
        }
    }
}
