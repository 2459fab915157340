use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The variants map onto the CLI exit codes: `Input`, `Dimension`, `Usage`,
/// `Config`, `Domain`, `Range` are input errors (exit 2) and `Format`,
/// `Integrity` are format errors (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("degenerate task: {0}")]
    DegenerateTask(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            message: msg.into(),
        }
    }

    /// True for errors caused by malformed or foreign files.
    pub fn is_format(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Integrity(_) | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
