//! Command implementations behind the `qgrad` binary: CSV traces, SVG
//! plots, experiment execution, sweeps and the verification suites.

pub mod commands;
pub mod csv;
pub mod plot;

/// Command failures split by exit code: configuration/usage problems exit
/// with 2, runtime failures (divergence, failed verification) with 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
