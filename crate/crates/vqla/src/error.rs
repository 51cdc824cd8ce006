use vqla_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum VqlaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("validation: {0}")]
    Validation(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("generator client: {0}")]
    Client(String),

    #[error("judge protocol: {0}")]
    Judge(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VqlaError>;

/// Process exit code classes for the command-line surface.
pub fn exit_code(err: &VqlaError) -> i32 {
    match err {
        VqlaError::Config(_)
        | VqlaError::Parse { .. }
        | VqlaError::Validation(_)
        | VqlaError::Vocab(_)
        | VqlaError::Io(_)
        | VqlaError::Json(_) => 2,
        VqlaError::Tensor(TensorError::NonFinite { .. }) | VqlaError::Numeric(_) => 3,
        VqlaError::Tensor(_) => 2,
        VqlaError::Client(_) | VqlaError::Judge(_) => 4,
    }
}
