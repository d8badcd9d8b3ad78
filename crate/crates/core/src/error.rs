use std::path::PathBuf;

use kdlab_compute::ComputeError;

#[derive(Debug, thiserror::Error)]
pub enum KdError {
    #[error("alignment error: {src} has {src_lines} lines but {tgt} has {tgt_lines}")]
    Alignment {
        src: PathBuf,
        tgt: PathBuf,
        src_lines: usize,
        tgt_lines: usize,
    },
    #[error("decode error: {path} line {line} is not valid UTF-8")]
    Decode { path: PathBuf, line: usize },
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("reserved token error: {0}")]
    ReservedToken(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("non-finite gradient for parameter {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T> = std::result::Result<T, KdError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| KdError::Io {
            path: path.into(),
            source,
        })
    }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, message: impl ToString) -> KdError {
    KdError::Format {
        path: path.into(),
        message: message.to_string(),
    }
}
