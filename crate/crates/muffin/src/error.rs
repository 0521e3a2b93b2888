use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

/// Errors of the file formats and command-line layer. The `Display` form
/// starts with a category prefix (`CONFIG/`, `DATA/`, `IO/`, `NUMERIC/`, ...)
/// so that it can be printed as is.
#[derive(Debug)]
pub enum Error {
    Core(muffin_core::Error),
    Io { path: PathBuf, source: io::Error },
    Config(String),
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Io { .. } => "IO",
            Error::Config(_) => "CONFIG",
            Error::Data(_) => "DATA",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Core(e) => write!(f, "{e}"),
            Error::Io { path, source } => write!(f, "IO/ {}: {source}", path.display()),
            Error::Config(m) => write!(f, "CONFIG/ {m}"),
            Error::Data(m) => write!(f, "DATA/ {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Core(e) => Some(e),
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<muffin_core::Error> for Error {
    fn from(e: muffin_core::Error) -> Self {
        Error::Core(e)
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
