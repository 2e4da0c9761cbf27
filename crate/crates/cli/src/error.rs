use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("directory {0} does not exist")]
    MissingDir(PathBuf),

    #[error("file {0} does not exist")]
    MissingFile(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config write error: {0}")]
    ConfigWrite(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] exposure_dro::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::MissingDir(_) => "missing_dir",
            Self::MissingFile(_) => "missing_file",
            Self::Config(_) | Self::ConfigParse(_) | Self::ConfigWrite(_) => "config",
            Self::Json(_) => "json",
            Self::Core(exposure_dro::Error::Leakage(_)) => "leakage",
            Self::Core(_) => "core",
        }
    }
}
