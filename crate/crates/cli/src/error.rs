use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_STAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: taskprune::Error },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Stage { .. } => EXIT_STAGE,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a core result with its pipeline stage.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for taskprune::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

/// Like [`StageExt`] for operations on a file: an underlying I/O failure
/// maps to [`CliError::Io`], anything else to the stage.
pub trait FileExt<T> {
    fn file(self, stage: &'static str, path: &Path) -> CliResult<T>;
}

impl<T> FileExt<T> for taskprune::Result<T> {
    fn file(self, stage: &'static str, path: &Path) -> CliResult<T> {
        self.map_err(|e| match e {
            taskprune::Error::Io(source) => CliError::io(path, source),
            source => CliError::Stage { stage, source },
        })
    }
}
