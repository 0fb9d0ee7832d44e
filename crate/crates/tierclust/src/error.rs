//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    /// Structurally valid input with an inadmissible value.
    #[error("validation error: {0}")]
    Validation(String),

    /// A cell column with no subject assignment (or vice versa).
    #[error("mapping error: {0}")]
    Mapping(String),

    /// QC filtering removed everything.
    #[error("empty result: {0}")]
    EmptyResult(String),

    /// All library sizes zero; no scaling factors exist.
    #[error("degenerate median: all library sizes are zero")]
    DegenerateMedian,

    /// Argument outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Poisson rate above the sampling guard (10^7).
    #[error("rate overflow: poisson rate {rate:.3e} exceeds the sampling guard")]
    RateOverflow { rate: f64 },

    /// Rate overflow inside the sampler, with the offending coordinate.
    #[error(
        "chain divergence at iteration {iteration}: rate {rate:.3e} at \
         (subject {subject}, gene {gene}, cell {cell})"
    )]
    Divergence {
        iteration: u64,
        subject: usize,
        gene: usize,
        cell: usize,
        rate: f64,
    },

    /// Invalid configuration (hyperparameters, truncation levels, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dimension mismatch between partitions, matrices, or traces.
    #[error("shape error: {0}")]
    Shape(String),

    /// Unexpected numerical failure (should be unreachable with log-space math).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
