use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("corpus file not found: {0} (run `stateest simulate` first)")]
    MissingCorpus(PathBuf),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("reports were computed on different corpora: {0}")]
    CorpusMismatch(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint kept at {path}")]
    Diverged { epoch: usize, path: PathBuf },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stateest::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// 1 for usage errors, 2 for runtime and data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }
}
