//! Error types shared across the laboratory.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the public API.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not conform; names the offending axes.
    Dimension { op: &'static str, detail: String },
    /// An API precondition was violated.
    Contract(String),
    /// A non-finite value appeared where all entries must be finite.
    Numeric(String),
    /// Degenerate input (e.g. zero-norm vector fed to cosine similarity).
    DegenerateInput(String),
    /// Invalid configuration (e.g. resolution incompatible with the pooling plan).
    Config(String),
    /// Malformed container file; `offset` is the byte position of the problem.
    Format { detail: String, offset: u64 },
    /// Unsupported container format version.
    Version { found: u32, supported: u32 },
    /// Capture/model fingerprint mismatch.
    Mismatch(String),
    /// Single-label inference could not identify a unique label.
    AmbiguousLabel { candidates: Vec<usize> },
    /// Every restart of an attack failed.
    Attack(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Format { detail, offset } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Version { found, supported } => {
                write!(f, "unsupported format version {found} (supported: {supported})")
            }
            Error::Mismatch(msg) => write!(f, "capture/model mismatch: {msg}"),
            Error::AmbiguousLabel { candidates } => {
                write!(f, "ambiguous label inference; candidates: {candidates:?}")
            }
            Error::Attack(msg) => write!(f, "attack failed: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
