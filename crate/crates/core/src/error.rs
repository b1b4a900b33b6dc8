//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or graph shape mismatch; the message names the offending node or operand.
    Shape(String),
    /// An operation precondition was violated (empty batch, non-scalar output, ...).
    Contract(String),
    /// Operation called in the wrong order (e.g. backward before forward).
    State(String),
    /// Config file parse or validation failure.
    Config {
        line: Option<usize>,
        message: String,
    },
    /// I/O failure, carrying the path involved.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Checkpoint file does not start with the expected magic bytes.
    BadMagic,
    /// Checkpoint version not supported by this build.
    UnsupportedVersion(u32),
    /// Checkpoint ended mid-record; the message names what was being read.
    Truncated(String),
    /// Architecture id not in the registry.
    UnknownArch(String),
    /// Dataset index references a file that does not exist.
    MissingFile(PathBuf),
    /// Image file exists but cannot be decoded.
    Decode { path: PathBuf, message: String },
    /// Dataset index names a class outside the expected set.
    UnknownClass { file: String, class: String },
    /// A pipeline command needs an artifact that has not been produced yet.
    MissingPrerequisite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::State(m) => write!(f, "invalid state: {m}"),
            Error::Config { line, message } => match line {
                Some(n) => write!(f, "config error at line {n}: {message}"),
                None => write!(f, "config error: {message}"),
            },
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::BadMagic => write!(f, "bad magic: not a checkpoint file"),
            Error::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Error::Truncated(m) => write!(f, "truncated checkpoint: {m}"),
            Error::UnknownArch(id) => write!(f, "unknown architecture id '{id}'"),
            Error::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            Error::Decode { path, message } => {
                write!(f, "cannot decode {}: {message}", path.display())
            }
            Error::UnknownClass { file, class } => {
                write!(f, "unknown class '{class}' for file '{file}'")
            }
            Error::MissingPrerequisite(m) => write!(f, "missing prerequisite: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
