use std::fmt;
use std::path::Path;

use doem_core::Error;

/// Failure classes, each with its own exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Validation => 3,
            ErrorClass::Io => 4,
            ErrorClass::Numeric => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { class: ErrorClass::Validation, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { class: ErrorClass::Io, message: format!("{}: {e}", path.display()) }
    }

    pub fn exit_code(&self) -> i32 {
        self.class.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let class = match &e {
            Error::DimensionMismatch(_)
            | Error::NotSquare { .. }
            | Error::InvalidSubsystem { .. }
            | Error::NotCqlvm(_)
            | Error::QubitCap { .. }
            | Error::InvalidParameter(_) => ErrorClass::Validation,
            Error::Io { .. } | Error::Idx(_) | Error::Format(_) => ErrorClass::Io,
            Error::NotHermitian { .. }
            | Error::InvalidDensity(_)
            | Error::EigenConvergence { .. }
            | Error::FunctionUndefined { .. }
            | Error::RankDeficient { .. }
            | Error::SupportViolation(_)
            | Error::ConditionS(_)
            | Error::InfeasibleExtension(_)
            | Error::NonFinite(_) => ErrorClass::Numeric,
        };
        Self { class, message: e.to_string() }
    }
}
