use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter path `{0}`")]
    DuplicatePath(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter trees differ at `{path}`: {detail}")]
    Incompatible { path: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}
