use std::fmt;

use serde::Serialize;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Usage,
    Validation,
    Numeric,
}

impl FailureKind {
    pub fn exit_code(self) -> u8 {
        match self {
            FailureKind::Usage => 2,
            FailureKind::Validation => 3,
            FailureKind::Numeric => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    kind: FailureKind,
    exit_code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Usage,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: FailureKind::Validation,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }

    /// One-line machine-readable form for standard error.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorJson {
            error: &self.message,
            kind: self.kind,
            exit_code: self.exit_code(),
        })
        .expect("plain struct serializes")
    }
}

impl From<pgl_core::Error> for CliError {
    fn from(e: pgl_core::Error) -> Self {
        let kind = if e.is_numeric() {
            FailureKind::Numeric
        } else {
            FailureKind::Validation
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
