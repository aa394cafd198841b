use std::path::PathBuf;

use voxshield_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{} already exists; pass --skip-existing to keep it or remove it first", .0.display())]
    Exists(PathBuf),
    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(CoreError::Config(_)) => EXIT_CONFIG,
            Self::Io { .. }
            | Self::Corrupt { .. }
            | Self::MissingInput { .. }
            | Self::Core(CoreError::Io { .. } | CoreError::Json { .. } | CoreError::Corruption { .. }) => EXIT_IO,
            Self::Exists(_) | Self::Core(_) => EXIT_RUNTIME,
        }
    }
}
