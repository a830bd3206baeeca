use std::path::PathBuf;

/// Errors raised anywhere in the certification engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or dimensions of two operands disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The base classifier failed while evaluating a batch of noisy samples.
    #[error("classifier failed at sample {sample_index}: {source}")]
    Classifier {
        sample_index: usize,
        #[source]
        source: ClassifierError,
    },

    /// A forward or backward pass produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration; `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

/// Failure reported by a [`BaseClassifier`](crate::smoothing::BaseClassifier).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("external classifier failed: {message}{}", stderr_suffix(.stderr_tail))]
    External {
        message: String,
        stderr_tail: String,
    },
}

fn stderr_suffix(tail: &str) -> String {
    if tail.is_empty() {
        String::new()
    } else {
        format!(" (stderr tail: {})", tail.trim_end())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
