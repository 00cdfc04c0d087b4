//! Crate-wide error type and `Result` alias.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the pipeline, from file ingestion to
/// solver failures. Variants carry enough context to be actionable at the CLI
/// boundary without backtraces.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("energy grid not strictly ascending (index {0})")]
    NonAscendingGrid(usize),

    #[error("negative value where a non-negative one is required: {0}")]
    NegativeValue(String),

    #[error("{what} out of range: {value} not in [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("element z={0} not present in cross-section library")]
    MissingElement(u32),

    #[error("degenerate beam model: {0}")]
    DegenerateModel(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("transparency underflow: medium opaque at lambda={lambda}, z={z}")]
    Opaque { lambda: f64, z: f64 },

    #[error("insufficient calibration data: {0} measurement(s), need >= 3 over 3 distinct materials")]
    InsufficientCalibration(usize),

    #[error("singular jacobian: calibration materials insufficiently distinct")]
    SingularJacobian,

    #[error("no convergence in {what} after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("no effective solution: measurement unrepresentable by any z in [1, 100]")]
    NoSolution,

    #[error("empty segment: all pixels censored or absent")]
    EmptySegment,

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach a path and message to a parse failure.
    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), msg: msg.into() }
    }
}
