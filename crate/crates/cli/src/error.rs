use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] unlearn_core::Error),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing {artifact} at {path}; run `latent-unlearn {command}` first")]
    MissingArtifact {
        artifact: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(key: &str, reason: String) -> Self {
        CliError::Config {
            key: key.to_string(),
            reason,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
