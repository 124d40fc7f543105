use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories of the IGT1 container parser.
///
/// Each corruption mode maps to its own variant so callers (and tests) can
/// tell a truncated file from one with a bad header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FormatErrorKind {
    BadMagic,
    Truncated,
    TrailingBytes,
    DuplicateName,
    InvalidName,
    InvalidRank,
    SizeOverflow,
    MissingTensor,
    ShapeMismatch,
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::BadMagic => "bad magic",
            Self::Truncated => "truncated payload",
            Self::TrailingBytes => "trailing bytes",
            Self::DuplicateName => "duplicate tensor name",
            Self::InvalidName => "invalid tensor name",
            Self::InvalidRank => "invalid rank",
            Self::SizeOverflow => "size overflow",
            Self::MissingTensor => "missing tensor",
            Self::ShapeMismatch => "shape mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Configuration error traced to a line of a config file (1-based).
    #[error("configuration error at line {line}: {message}")]
    ConfigAt { line: usize, message: String },

    #[error("empty group passed to {0}")]
    EmptyGroup(&'static str),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("format error ({kind}) at byte {offset}: {detail}")]
    Format {
        kind: FormatErrorKind,
        offset: usize,
        detail: String,
    },

    #[error("unknown instruction: {0:?}")]
    UnknownInstruction(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite gradient in {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(kind: FormatErrorKind, offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            offset,
            detail: detail.into(),
        }
    }

    /// The parser category, when this is a format error.
    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}
