use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("undefined baseline: clean mAP is zero")]
    UndefinedBaseline,
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("config hash mismatch: checkpoint was written for a different config")]
    ConfigHashMismatch,
    #[error("non-finite loss at iteration {iteration}; diagnostic snapshot at {snapshot}")]
    NonFiniteLoss { iteration: u64, snapshot: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest errors:\n{0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
