//! Shared error type for the crate.

use thiserror::Error;

/// Everything that can go wrong while building models, loading data, or
/// running experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or sizes between components wired together.
    #[error("dimension mismatch in {context}: {detail}")]
    DimMismatch { context: String, detail: String },

    /// A configuration value is out of range, inconsistent, or unsupported.
    #[error("invalid config `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// A requested resource would exceed a hard limit.
    #[error("{context}: requested size {requested} exceeds limit {limit}")]
    TooLarge {
        context: String,
        requested: usize,
        limit: usize,
    },

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    /// A NaN or infinity showed up where a finite number was required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A file or directory has unexpected structure or contents.
    #[error("malformed data in {path}: {reason}")]
    Malformed { path: String, reason: String },

    /// Results on disk do not match what their manifest promises.
    #[error("audit failure in {path}: {reason}")]
    AuditMismatch { path: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn malformed(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn audit(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::AuditMismatch {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code the CLI maps this error to: 2 for anything wrong
    /// with the configuration itself, 3 for failures at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. }
            | Error::DimMismatch { .. }
            | Error::TooLarge { .. }
            | Error::Json { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
