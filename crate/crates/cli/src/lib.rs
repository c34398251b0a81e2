//! Command-line front end of `oscidiff`: experiment configs, subcommand
//! dispatch, tables and artifacts.

pub mod commands;
pub mod config;
pub mod table;

pub use commands::{run_command, Command, Options, Outcome};
pub use config::{ExperimentConfig, FieldSource, Grids, RegimeChoice};
pub use table::Table;

use oscidiff::Error;

/// Environment variable naming the fixture directory.
pub const FIXTURES_ENV: &str = "OSCIDIFF_FIXTURES";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    /// An asserted mathematical statement failed.
    #[error("assertion failed: {0}")]
    Assertion(Error),
    #[error("solver error: {0}")]
    Solver(Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1: bad input, 2: solver failure, 3: failed assertion.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingArtifact(_) | CliError::Io(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Assertion(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::BoundViolated { .. } | Error::SymmetryViolated { .. } | Error::SkewFormulaMismatch { .. } => {
                CliError::Assertion(e)
            }
            Error::Invalid(m) | Error::Parse(m) | Error::DimensionMismatch(m) | Error::RegimeMismatch(m) => {
                CliError::Config(m)
            }
            Error::AsymmetricCoefficient { .. } | Error::EllipticityViolation { .. } => CliError::Config(e.to_string()),
            Error::Io(io) => CliError::Io(io),
            Error::Json(j) => CliError::Config(j.to_string()),
            other => CliError::Solver(other),
        }
    }
}
