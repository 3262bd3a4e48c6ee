use simplefold_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("structure contains no protein residues")]
    EmptyStructure,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("ground-truth coordinates required for {0}")]
    MissingCoordinates(&'static str),
    #[error("refusing to write non-finite coordinate for atom {0}")]
    NonFinite(usize),
    #[error("score undefined: {0}")]
    UndefinedScore(&'static str),
    #[error("sample diverged at step {0}")]
    Diverged(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
