use thiserror::Error;

/// Errors raised by the tensor, checksum, and protection layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A caller asked for something the supplied state cannot provide,
    /// e.g. an output checksum whose input checksum was never computed.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("invalid fault spec: {0}")]
    FaultSpec(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    /// The layer was recomputed and still failed verification.
    #[error("integrity failure in layer {layer}: {detail}")]
    Integrity { layer: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
