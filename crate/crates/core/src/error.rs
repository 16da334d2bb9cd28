use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for axis `{axis}` (len {len})")]
    IndexOutOfRange {
        axis: String,
        index: usize,
        len: usize,
    },

    #[error("invalid axis `{axis}`: {reason}")]
    InvalidAxis { axis: String, reason: String },

    #[error("invalid action set: {0}")]
    InvalidActionSet(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("line {line}: {reason}")]
    Ingest { line: u64, reason: String },

    #[error("no interaction scenarios found in input")]
    NoScenarios,

    #[error("policy evaluation did not converge after {sweeps} sweeps (residual {residual:e})")]
    EvaluationDiverged { sweeps: usize, residual: f64 },

    #[error(
        "policy iteration hit the cap of {iterations} iterations \
         (last residual {residual:e}, {changed} cells still changing)"
    )]
    IterationCap {
        iterations: usize,
        residual: f64,
        changed: usize,
    },

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: String, found: String },

    #[error("role mismatch: expected {expected}, found {found}")]
    RoleMismatch { expected: String, found: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
