use thiserror::Error;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    /// The reader of stdout went away, as in `sdtm report | head`.
    #[error("stdout closed")]
    StdoutClosed,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::StdoutClosed => 0,
        }
    }

    pub fn stdout(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            CliError::StdoutClosed
        } else {
            CliError::Io(format!("stdout: {e}"))
        }
    }
}

impl From<sdtm::Error> for CliError {
    fn from(e: sdtm::Error) -> Self {
        match e {
            sdtm::Error::Io(e) => CliError::Io(e.to_string()),
            sdtm::Error::Mismatch(m) => CliError::Mismatch(m),
            other => CliError::Config(other.to_string()),
        }
    }
}
