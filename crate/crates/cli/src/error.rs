use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data; messages carry a byte offset or line number.
    #[error("data format error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error(transparent)]
    Core(butterfly_hessian::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<butterfly_hessian::Error> for CliError {
    fn from(e: butterfly_hessian::Error) -> Self {
        use butterfly_hessian::Error as E;
        match e {
            E::InvalidArgument(m) => CliError::Config(m),
            E::Format(m) => CliError::Data(m),
            E::Io(m) => CliError::Io(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
