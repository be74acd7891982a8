use std::fmt;
use std::io;

/// Errors raised across the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor extents.
    Dimension(String),
    /// Operation not defined for a tensor's element type.
    DType(String),
    /// A caller violated an operation's precondition.
    Contract(String),
    /// Inconsistent or invalid configuration.
    Config(String),
    /// Malformed archive or dataset file.
    Format(String),
    /// A normalized quantity would divide by a zero norm.
    NumericGuard(String),
    Io(io::Error),
}

impl Error {
    /// Whether this error stems from user configuration rather than file contents.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) | Error::DType(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::DType(m) => write!(f, "type error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::NumericGuard(m) => write!(f, "numeric guard: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("json: {e}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
