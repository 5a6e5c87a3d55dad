use thiserror::Error;

/// Failure classes of a lab run, each with its own process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("resource error: {0}")]
    Resource(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn class(&self) -> &'static str {
        match self {
            LabError::Validation(_) => "validation",
            LabError::Resource(_) => "resource",
            LabError::Numerical(_) => "numerical",
            LabError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Validation(_) => 2,
            LabError::Resource(_) => 3,
            LabError::Numerical(_) => 4,
            LabError::Io(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            LabError::Validation(m) | LabError::Resource(m) | LabError::Numerical(m) | LabError::Io(m) => m,
        }
    }

    /// One-line JSON object for machine consumption.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.class(), "exit_code": self.exit_code(), "message": self.message() })
            .to_string()
    }
}

impl From<stochknap_core::Error> for LabError {
    fn from(e: stochknap_core::Error) -> Self {
        use stochknap_core::Error as E;
        match e {
            E::Validation(m) | E::Range(m) => LabError::Validation(m),
            E::Resource(m) => LabError::Resource(m),
            E::Numerical(m) => LabError::Numerical(m),
            E::Io(m) => LabError::Io(m),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> LabError {
    LabError::Validation(msg.into())
}
