use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {layer}: expected {expected}, got {actual}")]
    Dimension {
        layer: &'static str,
        expected: String,
        actual: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("bag is empty")]
    EmptyBag,

    #[error("slice geometry: {0}")]
    SliceGeometry(String),

    #[error("invalid dataset spec: {0}")]
    Spec(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dimension(layer: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dimension {
            layer,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
