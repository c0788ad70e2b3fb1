use std::path::PathBuf;

/// Errors produced anywhere in the training laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error in {context}: {message}")]
    Decode { context: String, message: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Decode {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::NotScalar(_) | Error::TapeConsumed => 2,
            Error::NumericFault(_) => 3,
            Error::Io { .. } | Error::Decode { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
