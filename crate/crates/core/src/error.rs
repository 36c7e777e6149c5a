//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A cell violated the field's value invariant (negative count,
    /// non-integer count, NaN forcing value). Coordinates are 1-based
    /// data coordinates, excluding header lines.
    #[error("invalid cell at row {row}, column {col} of {path}: {message}")]
    InvalidCell {
        path: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },

    #[error("time gap in {path}: expected stamp {expected}, found {found}")]
    TimeGap {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    /// Not enough forcing history to build an embedding or alignment.
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    /// The k-nearest-neighbor graph splits into several components, so
    /// eigenmap distances across components would be meaningless.
    #[error("neighbor graph is disconnected ({components} components at k_nn={k_nn})")]
    DisconnectedGraph { components: usize, k_nn: usize },

    /// Every in-neighborhood kernel weight underflowed to zero.
    #[error(
        "degenerate kernel weights: theta1={theta1:.3e} with min distance {min_dist:.3e} \
         underflows every neighborhood weight"
    )]
    DegenerateKernel { theta1: f64, min_dist: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Wraps a pipeline-stage failure so the CLI can report which stage died.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
