// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RiaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RiaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stale detection cache: expected fingerprint {expected}, found {found}")]
    StaleCache { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl RiaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RiaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            RiaError::Config(_) | RiaError::Checkpoint(_) | RiaError::Serde(_) => 3,
            RiaError::Input(_) | RiaError::Data(_) | RiaError::Io { .. } | RiaError::Image { .. } => 4,
            RiaError::StaleCache { .. } => 5,
        }
    }
}

impl From<serde_json::Error> for RiaError {
    fn from(e: serde_json::Error) -> Self {
        RiaError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for RiaError {
    fn from(e: toml::de::Error) -> Self {
        RiaError::Config(e.to_string())
    }
}
