use std::fmt;

/// Errors surfaced by the library and the CLI.
///
/// Every variant maps to a stable, machine-parseable category string via
/// [`MsgcError::category`]; the CLI prints it as the first token of its one-line
/// error report.
#[derive(Debug, thiserror::Error)]
pub enum MsgcError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("trailing bytes: {0}")]
    TrailingBytes(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("label {label} out of range for {classes} classes (sample {index})")]
    LabelOutOfRange { index: usize, label: u32, classes: u32 },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error("analysis unavailable: {0}")]
    Analysis(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MsgcError {
    pub fn category(&self) -> &'static str {
        match self {
            MsgcError::Config(_) => "config",
            MsgcError::Shape(_) => "shape",
            MsgcError::BadMagic { .. } => "bad-magic",
            MsgcError::UnsupportedVersion(_) => "bad-version",
            MsgcError::Truncated(_) => "truncated",
            MsgcError::TrailingBytes(_) => "trailing-bytes",
            MsgcError::CrcMismatch { .. } => "crc-mismatch",
            MsgcError::LabelOutOfRange { .. } => "label-out-of-range",
            MsgcError::UnknownKey(_) => "unknown-key",
            MsgcError::InvalidValue { .. } => "invalid-value",
            MsgcError::NonFinite(_) => "non-finite",
            MsgcError::CheckpointMismatch(_) => "checkpoint-mismatch",
            MsgcError::GradCheckFailed(_) => "gradcheck-failed",
            MsgcError::Analysis(_) => "analysis",
            MsgcError::Io(_) => "io",
        }
    }

    pub(crate) fn shape(msg: impl fmt::Display) -> Self {
        MsgcError::Shape(msg.to_string())
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        MsgcError::Config(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MsgcError>;
