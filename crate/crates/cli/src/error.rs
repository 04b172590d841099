use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot parse {}: {source}", path.display())]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("missing artifact {}; run `cola {stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("{} was written under config hash {found}, the current config hashes to {expected}; rerun `cola {stage}`", path.display())]
    HashMismatch {
        path: PathBuf,
        stage: &'static str,
        found: String,
        expected: String,
    },

    #[error(transparent)]
    Core(#[from] cola::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Toml { .. } | CliError::HashMismatch { .. } => 2,
            CliError::Core(cola::Error::Config(_) | cola::Error::InvalidArgument(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
