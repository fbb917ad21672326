use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("load error: {0}")]
    Load(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}
