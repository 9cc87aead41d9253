//! Error type shared across the crate.
//!
//! Every variant carries enough context to produce a one-line,
//! machine-parseable message of the form `kind: detail`.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, model passes, adapters, and I/O.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A numeric input violated finiteness or positivity requirements.
    Numeric { context: &'static str },
    /// A vector with zero norm reached an operation that needs a direction.
    DegenerateVector { context: &'static str },
    /// A caller-facing contract was violated (e.g. negative scores).
    Contract { message: String },
    /// Token sequence exceeds the model's maximum context length.
    Capacity { length: usize, max: usize },
    /// Token id outside the model vocabulary.
    Vocab { token: u32, vocab_size: usize },
    /// Adapter targets failed to resolve against a model.
    AdapterBinding { details: Vec<String> },
    /// Malformed or empty input supplied to an operation.
    Input { message: String },
    /// A container or export file violated the on-disk format.
    Format { field: &'static str, message: String },
    /// Underlying filesystem failure.
    Io { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                context,
                expected,
                got,
            } => write!(f, "shape: {context}: expected {expected}, got {got}"),
            Error::Numeric { context } => write!(f, "numeric: {context}"),
            Error::DegenerateVector { context } => {
                write!(f, "degenerate-vector: {context}")
            }
            Error::Contract { message } => write!(f, "contract: {message}"),
            Error::Capacity { length, max } => {
                write!(f, "capacity: sequence length {length} exceeds max_seq_len {max}")
            }
            Error::Vocab { token, vocab_size } => {
                write!(f, "vocab: token id {token} out of range for vocab_size {vocab_size}")
            }
            Error::AdapterBinding { details } => {
                write!(f, "adapter-binding: {}", details.join("; "))
            }
            Error::Input { message } => write!(f, "input: {message}"),
            Error::Format { field, message } => write!(f, "format({field}): {message}"),
            Error::Io { path, message } => write!(f, "io: {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: &std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
