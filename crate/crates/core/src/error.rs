use std::path::PathBuf;

use crate::optim::SolveStatus;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("time index {t} out of range: {reason}")]
    TimeIndex { t: usize, reason: String },

    #[error("invalid fault: {0}")]
    Fault(String),

    #[error("CSV parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("model file error at line {line}: {message}")]
    ModelFormat { line: usize, message: String },

    #[error("least-squares problem is underdetermined: {rows} rows for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },

    #[error("invalid convex problem: {0}")]
    Problem(String),

    #[error(
        "solver stopped with status {status:?} after {iterations} iterations \
         (primal residual {primal:.3e}, dual residual {dual:.3e})"
    )]
    Solver {
        status: SolveStatus,
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("counterfactual certificate failed: constraint {index} exceeds its tolerance by {excess:.3e}")]
    Certificate { index: usize, excess: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}
