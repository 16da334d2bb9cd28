use coopdrive_core::Error as CoreError;

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("no interaction scenarios found in input")]
    NoScenarios,

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::NoScenarios => exit::NO_SCENARIOS,
        }
    }
}

pub mod exit {
    pub const OK: i32 = 0;
    /// Bad flags or arguments (also what clap exits with).
    pub const USAGE: i32 = 2;
    /// Inputs parse but are inconsistent or out of range.
    pub const VALIDATION: i32 = 3;
    /// I/O or solver failure.
    pub const RUNTIME: i32 = 4;
    pub const NO_SCENARIOS: i32 = 5;
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NoScenarios => CliError::NoScenarios,
            CoreError::IndexOutOfRange { .. }
            | CoreError::InvalidAxis { .. }
            | CoreError::InvalidActionSet(_)
            | CoreError::InvalidParam(_)
            | CoreError::Ingest { .. }
            | CoreError::GridMismatch { .. }
            | CoreError::RoleMismatch { .. }
            | CoreError::Format { .. }
            | CoreError::Config(_)
            | CoreError::Csv(_) => CliError::Validation(e.to_string()),
            CoreError::EvaluationDiverged { .. }
            | CoreError::IterationCap { .. }
            | CoreError::Io(_)
            | CoreError::Json(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
