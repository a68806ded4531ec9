//! File handling, configuration, and command implementations behind the
//! `evc` binary.

pub mod commands;
pub mod config;
pub mod io;
pub mod report;

use std::process::ExitCode;

use thiserror::Error;

/// Process-level outcomes. Usage problems exit 1, unreadable or inconsistent
/// data exits 2, and undecodable streams exit 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Decode(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
            CliError::Decode(_) => ExitCode::from(3),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<evc_core::Error> for CliError {
    fn from(e: evc_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<evc_core::CodecError> for CliError {
    fn from(e: evc_core::CodecError) -> Self {
        CliError::Decode(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
