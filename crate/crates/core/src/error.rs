//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Convolution geometry is inconsistent (filter larger than input,
    /// stride does not divide, channel mismatch).
    #[error("convolution geometry: {0}")]
    Geometry(String),

    /// A caller-supplied value is out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// An exact-enumeration routine was asked for a model beyond its guard.
    #[error("model too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    /// The architecture mini-language failed to parse; `pos` is the byte
    /// offset into the spec string.
    #[error("architecture spec error at byte {pos}: {msg}")]
    ArchParse { pos: usize, msg: String },

    /// Magic bytes of a binary file did not match.
    #[error("bad magic at offset {offset}: expected {expected}, found {found:#010x}")]
    BadMagic {
        offset: u64,
        expected: &'static str,
        found: u32,
    },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// File ended before the declared payload did.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Any other structural problem in a binary or text artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
