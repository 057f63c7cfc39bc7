//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong while building, training or evaluating
/// a fused detector.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    Dimension(String),
    /// A parameter value is outside its valid range.
    Parameter(String),
    /// Input data violates a contract (labels, probability vectors,
    /// missing modalities, malformed detections).
    Input(String),
    /// An operation was applied in an invalid state (missing gradients,
    /// trainable experts during fusion training).
    State(String),
    /// Invalid build or run configuration.
    Config(String),
    /// A loss function that must be deterministic returned two different
    /// values for the same parameters.
    Determinism(String),
    /// A file did not parse; carries the file name and byte offset.
    Parse {
        file: String,
        offset: u64,
        message: String,
    },
    /// Underlying I/O failure.
    Io {
        context: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Determinism(m) => write!(f, "determinism error: {m}"),
            Error::Parse {
                file,
                offset,
                message,
            } => write!(f, "parse error in {file} at byte {offset}: {message}"),
            Error::Io { context, source } => write!(f, "io error ({context}): {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}
