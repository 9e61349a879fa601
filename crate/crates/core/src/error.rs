use skypart_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum SkyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss in group {group}")]
    NonFiniteLoss { group: String },
}

pub type Result<T, E = SkyError> = std::result::Result<T, E>;

impl SkyError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SkyError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        SkyError::Format { what, msg: msg.into() }
    }
}
