use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DuetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DuetError {
    #[error(transparent)]
    Core(#[from] coopdrive_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("unknown scenario `{0}` (expected side-by-side or side-by-side-mirrored)")]
    UnknownScenario(String),

    #[error("bad session log {path}: {reason}")]
    BadLog { path: PathBuf, reason: String },
}
