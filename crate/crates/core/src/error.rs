use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt canvas: {0}")]
    CorruptCanvas(String),

    #[error("position ({row}, {col}) exceeds max_positions ({max_rows}, {max_cols}); raise max_positions to at least ({need_rows}, {need_cols})")]
    PositionOutOfRange {
        row: usize,
        col: usize,
        max_rows: usize,
        max_cols: usize,
        need_rows: usize,
        need_cols: usize,
    },

    #[error("missing checkpoint for stage `{stage}`: {path}")]
    MissingCheckpoint { stage: String, path: PathBuf },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export with a matching build")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("output directory {0} already exists (pass overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
