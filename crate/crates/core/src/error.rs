use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("layer {layer} is degenerate: coefficients sum to zero")]
    DegenerateLayer { layer: usize },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated file: tensor data needs {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("tensor `{name}` has shape {found:?} but the config implies {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
