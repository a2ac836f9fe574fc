use aerograph_core::Error as CoreError;
use serde::Serialize;
use std::fmt;

/// Command failure with a machine-readable kind and a process exit code.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip)]
    pub code: i32,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: msg.into(),
            code: 2,
        }
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        Self {
            kind: "not_found",
            message: msg.into(),
            code: 2,
        }
    }

    pub fn other(kind: &'static str, msg: impl Into<String>) -> Self {
        Self {
            kind,
            message: msg.into(),
            code: 1,
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match &e {
            CoreError::Io { source, .. } if is_not_found(source) => Self::not_found(msg),
            CoreError::Stream(source) if is_not_found(source) => Self::not_found(msg),
            CoreError::Io { .. } | CoreError::Stream(_) => Self::other("io", msg),
            CoreError::Parse { .. } => Self::other("parse", msg),
            CoreError::Config(_) | CoreError::Variant(_) => Self::other("config", msg),
            CoreError::Json(_) => Self::other("json", msg),
            CoreError::Format(_) => Self::other("format", msg),
            CoreError::Aborted(_) => Self::other("aborted", msg),
            _ => Self::other("data", msg),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::other("json", e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
