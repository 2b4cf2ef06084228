use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
#[derive(Debug, Error)]
pub enum VarError {
    /// Tensor or image dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value is outside its admissible domain (non-finite input, bad parameter, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A static configuration constraint is violated.
    #[error("config error: {0}")]
    Config(String),
    /// Input data is missing or malformed.
    #[error("data error: {0}")]
    Data(String),
    /// A checkpoint could not be located or parsed.
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VarError>;

impl VarError {
    pub fn shape(msg: impl Into<String>) -> Self {
        VarError::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        VarError::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        VarError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        VarError::Data(msg.into())
    }
    pub fn load(msg: impl Into<String>) -> Self {
        VarError::Load(msg.into())
    }
}
