use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Every fallible operation names the operation it was raised from so that a
/// failure deep inside a training loop still points at the offending call.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; both shapes are reported verbatim.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// A documented precondition was violated by the caller.
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Numeric failure at run time: non-finite values, singular systems, ...
    #[error("{op}: numeric error: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A configuration field failed validation; names the offending key.
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// Malformed on-disk artifact. `offset` is the byte position of the
    /// first inconsistency when it is known.
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Not enough samples/classes to honor a sampling request.
    #[error("insufficient data: {detail}")]
    InsufficientData { detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn insufficient(detail: impl Into<String>) -> Self {
        Error::InsufficientData {
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
