use thiserror::Error;

pub type Result<T> = std::result::Result<T, LiraError>;

#[derive(Debug, Error)]
pub enum LiraError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LiraError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        LiraError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LiraError::Invalid(msg.into())
    }
}
