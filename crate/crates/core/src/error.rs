use std::io;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

/// A QUIC header that cannot be walked to a packet boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MalformedHeader {
    #[error("empty payload")]
    Empty,
    #[error("truncated header at offset {0}")]
    Truncated(usize),
    #[error("connection ID length {len} at offset {offset} exceeds the remaining bytes")]
    CidOverrun { offset: usize, len: usize },
    #[error("length field at offset {offset} claims {claimed} bytes, {remaining} remain")]
    LengthOverrun { offset: usize, claimed: u64, remaining: usize },
    #[error("fixed bit not set")]
    NotQuic,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),
    #[error("malformed input at {location}: {reason}")]
    Malformed { location: String, reason: String },
}

impl IngestError {
    pub fn malformed(location: impl Into<String>, reason: impl Into<String>) -> Self {
        IngestError::Malformed { location: location.into(), reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels disagree with trace: {0}")]
    LabelMismatch(String),
}
