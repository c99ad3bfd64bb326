use alloc::string::String;
use core::fmt;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of its allowed range.
    InvalidConfig(String),
    /// A graph operation was given a graph that violates its precondition.
    InvalidGraph(String),
    /// A bus or line id does not exist in the microgrid.
    UnknownId { kind: &'static str, id: usize },
    /// Tensor or feature shapes do not line up.
    ShapeMismatch(String),
    /// The LP solver failed on a problem that should always be solvable.
    Solver(String),
    /// An operation that needs data got none.
    EmptyInput(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidGraph(msg) => write!(f, "invalid graph: {msg}"),
            Error::UnknownId { kind, id } => write!(f, "unknown {kind} id {id}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Solver(msg) => write!(f, "LP solver failure: {msg}"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
