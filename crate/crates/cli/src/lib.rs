//! Experiment runner for the Wasserstein dictionary-learning toolkit:
//! configuration handling, experiment commands (barycenter, dictionary
//! learning, CP dictionary learning), file outputs (CSV, PGM, tensor
//! binaries), and the self-verification suite.

pub mod config;
pub mod experiments;
pub mod output;
pub mod verify;

use wdl_core::CoreError;

/// Errors mapped onto the process exit codes:
/// 1 solver non-convergence, 2 invalid configuration, 3 I/O, 4 verification
/// failure.
#[derive(Debug)]
pub enum CliError {
    Solver(CoreError),
    Config(String),
    Io(String),
    VerifyFailed(usize),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Solver(e) => write!(f, "solver error: {e}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::VerifyFailed(n) => write!(f, "{n} verification check(s) failed"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::VerifyFailed(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        fn classify(e: &CoreError) -> i32 {
            match e {
                CoreError::Convergence { .. } => 1,
                CoreError::Step { source, .. } => classify(source),
                CoreError::Io(_) | CoreError::Format(_) => 3,
                _ => 2,
            }
        }
        match classify(&e) {
            1 => CliError::Solver(e),
            3 => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
