use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Missing(String),
    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Core(#[from] ptu_core::Error),
}

impl CliError {
    /// 0 success, 1 configuration, 2 I/O or missing artifact, 3 malformed data.
    pub fn exit_code(&self) -> i32 {
        use ptu_core::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Missing(_) => 2,
            CliError::Malformed { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Contract(_) | E::Tensor(_) => 1,
                E::Io { .. } => 2,
                E::Parse { .. } => 3,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
