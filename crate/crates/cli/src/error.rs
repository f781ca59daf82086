use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ifrp::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint directory {0} is locked by another process")]
    Locked(String),
    #[error("{0} of {1} gradient checks failed")]
    ChecksFailed(usize, usize),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(ifrp::Error::Corrupt(_) | ifrp::Error::State(_)) => EXIT_CORRUPT,
            CliError::Core(_) | CliError::Config(_) | CliError::Usage(_) | CliError::Locked(_) => EXIT_USAGE,
            CliError::ChecksFailed(..) => EXIT_CHECKS_FAILED,
        }
    }
}
