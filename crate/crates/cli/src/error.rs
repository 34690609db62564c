use serde::Serialize;
use thiserror::Error;

/// Failure of a CLI run, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config schema violation: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(ddspme_core::error::Error),

    #[error("assumption probes failed in strict mode: {}", .0.join(", "))]
    ProbeFailure(Vec<String>),

    #[error("{0}")]
    Core(ddspme_core::error::Error),

    #[error("io: {0}")]
    Io(String),
}

impl From<ddspme_core::error::Error> for CliError {
    fn from(e: ddspme_core::error::Error) -> Self {
        use ddspme_core::error::Error;
        if e.is_numerical() {
            CliError::Numerical(e)
        } else {
            match e {
                Error::InvalidParameter(m) => CliError::Schema(vec![m]),
                Error::Io(m) => CliError::Io(m),
                other => CliError::Core(other),
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Machine-readable form written to `error.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    pub details: Vec<String>,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::ProbeFailure(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (kind, details) = match self {
            CliError::Schema(v) => ("schema", v.clone()),
            CliError::Numerical(e) => ("numerical", vec![format!("{e:?}")]),
            CliError::ProbeFailure(v) => ("probe_failure", v.clone()),
            CliError::Core(e) => ("internal", vec![format!("{e:?}")]),
            CliError::Io(m) => ("io", vec![m.clone()]),
        };
        ErrorRecord {
            kind,
            exit_code: self.exit_code(),
            message: self.to_string(),
            details,
        }
    }
}
