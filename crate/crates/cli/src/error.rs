use pecl_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(CoreError::Json(e))
    }
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Core(CoreError::InvalidConfig(_) | CoreError::NonPositiveTemperature(_)) => 1,
            Self::Core(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
