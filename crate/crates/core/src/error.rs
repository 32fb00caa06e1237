//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by graph, flow and training machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A directed cycle was found where a DAG was required.
    #[error("graph contains a cycle: {}", format_cycle(.cycle))]
    Cycle { cycle: Vec<usize> },

    /// A non-finite value appeared during numerical evaluation.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Fixed-point or bracketing iteration failed to converge.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

fn format_cycle(cycle: &[usize]) -> String {
    let mut s = cycle
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" -> ");
    if let Some(first) = cycle.first() {
        s.push_str(&format!(" -> {first}"));
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
