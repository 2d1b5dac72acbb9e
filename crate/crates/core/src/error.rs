use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("numerical overflow in linear-domain Sinkhorn (epsilon = {epsilon}); retry with log_domain = true")]
    SinkhornOverflow { epsilon: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    ConfigLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("format error at line {line}: {message}")]
    FormatLine { line: usize, message: String },
    #[error("{0}: unsupported file type (expected .emb or .csv)")]
    UnsupportedFormat(PathBuf),
    #[error("training diverged at sample {sample}: {message}")]
    Divergence { sample: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Format { .. }
            | Error::FormatLine { .. }
            | Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::UnsupportedFormat(_)
            | Error::Dimension { .. } => 2,
            _ => 3,
        }
    }
}
