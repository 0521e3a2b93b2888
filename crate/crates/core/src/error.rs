use alloc::string::String;
use core::fmt;

/// Failure categories shared by every module of the core crate.
///
/// The `Display` form carries a category prefix (`CONFIG/`, `DATA/`, ...)
/// so that callers can surface it unchanged on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid hyperparameter or layout request.
    Config(String),
    /// Malformed or empty data.
    Data(String),
    /// Incompatible tensor or array shapes.
    Shape(String),
    /// Non-finite or otherwise unusable numeric input.
    Numeric(String),
    /// Index outside its valid range.
    Index(String),
    /// Operation invoked in the wrong lifecycle state.
    State(String),
    /// Caller violated an operation precondition.
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "CONFIG",
            Error::Data(_) => "DATA",
            Error::Shape(_) => "SHAPE",
            Error::Numeric(_) => "NUMERIC",
            Error::Index(_) => "INDEX",
            Error::State(_) => "STATE",
            Error::Contract(_) => "CONTRACT",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Error::Config(m)
            | Error::Data(m)
            | Error::Shape(m)
            | Error::Numeric(m)
            | Error::Index(m)
            | Error::State(m)
            | Error::Contract(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/ {}", self.category(), self.message())
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
