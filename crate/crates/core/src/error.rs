use std::io;

use crate::transport::MsgType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes of the operands do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A real value falls outside the fixed-point range.
    #[error("value out of range: {0}")]
    Range(String),
    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The peer or the correlated-randomness stream misbehaved.
    #[error("protocol abort: {0}")]
    Protocol(String),
    #[error("unexpected message: expected {expected:?}, got {got:?}")]
    UnexpectedMessage { expected: MsgType, got: MsgType },
    #[error("correlated randomness exhausted: {0}")]
    Exhausted(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("in layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures that happen while the two parties are talking, as
    /// opposed to bad inputs or configuration.
    pub fn is_protocol_abort(&self) -> bool {
        match self {
            Error::Protocol(_)
            | Error::UnexpectedMessage { .. }
            | Error::Exhausted(_)
            | Error::Io(_) => true,
            Error::Layer { source, .. } => source.is_protocol_abort(),
            _ => false,
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Error {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }
}
