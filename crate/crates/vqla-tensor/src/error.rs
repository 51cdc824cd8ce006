use crate::scalar::Dtype;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("gradient check: two forward passes disagree, the function is non-deterministic")]
    NonDeterministic,

    #[error("optimizer: missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("parameter store: {0}")]
    Store(String),

    #[error("checkpoint: {0}")]
    Format(String),

    #[error("checkpoint: entry `{name}` has dtype {found} but the store expects {expected}")]
    DtypeMismatch {
        name: String,
        found: Dtype,
        expected: Dtype,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        msg: msg.into(),
    })
}

pub(crate) fn contract_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract {
        op,
        msg: msg.into(),
    })
}
