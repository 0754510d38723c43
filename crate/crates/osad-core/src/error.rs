//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the defense laboratory.
///
/// `Config` maps to CLI exit code 2, everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or missing configuration (bad key, unknown dataset, disabled component).
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes do not match an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset problems: missing files, empty partitions, undecodable images.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller violated an operation's input contract (e.g. unnormalized rows).
    #[error("contract error: {0}")]
    Contract(String),

    /// OpenMax calibration failures (insufficient samples, degenerate fits).
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn calibration(msg: impl Into<String>) -> Self {
        Error::Calibration(msg.into())
    }

    /// True for errors that should surface as CLI exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(format!("invalid config file: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
