//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
///
/// The variants map onto the process exit codes used by the CLI: `Config`
/// is a usage error, `Numeric` and `Contract` are numeric failures, and the
/// remaining variants are data errors.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration (bad dimension, unknown name, out-of-range knob).
    Config(String),
    /// Tensor/matrix shape mismatch.
    Shape(String),
    /// Sequence longer than the allowed maximum.
    Length(String),
    /// Non-finite input where a finite real is required.
    Domain(String),
    /// Malformed or unusable input data (corpus, checkpoint, CSV).
    Data(String),
    /// Non-finite value produced during computation; names the operation.
    Numeric { op: String, detail: String },
    /// API misuse (e.g. backward on a consumed tape).
    Contract(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn length(msg: impl Into<String>) -> Self {
        Error::Length(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Length(m) => write!(f, "length error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric { op, detail } => write!(f, "numeric error in {op}: {detail}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
        }
    }
}

impl std::error::Error for Error {}
