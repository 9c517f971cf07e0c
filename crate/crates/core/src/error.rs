use thiserror::Error;

#[derive(Debug, Error)]
pub enum RcfError {
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RcfError>;

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::RcfError::Shape(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure_shape;
