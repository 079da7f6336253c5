use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The vector is too close to zero to normalize. Usually a dead network output.
    #[error("cannot normalize vector with norm {norm:e}")]
    DegenerateVector { norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}", format_error_message(.path, .line, .message))]
    Format {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("cannot access {}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training stalled at epoch {epoch}: no hard or semi-hard triplets were mined")]
    TrainingStalled { epoch: usize },

    #[error("sample {sample_id:?} has no hypotheses")]
    EmptyHypotheses { sample_id: String },
}

fn format_error_message(path: &Option<PathBuf>, line: &Option<usize>, message: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{l}: {message}", p.display()),
        (Some(p), None) => format!("{}: {message}", p.display()),
        (None, Some(l)) => format!("line {l}: {message}"),
        (None, None) => message.to_string(),
    }
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to a format error that does not have one yet.
    pub(crate) fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Format {
                path: None,
                line,
                message,
            } => Error::Format {
                path: Some(p.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(context, expected, got))
    }
}
