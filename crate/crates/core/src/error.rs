// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by tensor ops, data loading, training and probing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested op.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid model, training or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A gradient contained NaN or infinity.
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    /// A training loss became NaN or infinite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Dataset could not be loaded or failed validation.
    #[error("failed to load dataset `{name}`: {reason}")]
    Load { name: String, reason: String },

    /// Constant channel, the scaler cannot normalize it.
    #[error("channel `{channel}` of dataset `{dataset}` is constant on the training partition")]
    ConstantChannel { dataset: String, channel: String },

    /// Malformed checkpoint or activation file.
    #[error("invalid artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
