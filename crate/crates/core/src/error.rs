use thiserror::Error;

/// Errors produced while configuring, mapping, scheduling or simulating.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A hardware or layer parameter violates an invariant.
    #[error("invalid config: {0}")]
    Config(String),

    /// A configuration file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// The layer cannot be placed on the PE grid.
    #[error("layer `{layer}` is unmappable: {reason}")]
    Unmappable { layer: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The mapper produced a plan that overflows a hardware resource.
    #[error("capacity violation: {0}")]
    Capacity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
