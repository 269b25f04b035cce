//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A container, key file, or config failed to parse or had an
    /// inconsistent schema.
    #[error("format error{}: {detail}", path_suffix(.path))]
    Format {
        path: Option<String>,
        detail: String,
    },

    /// Caller passed arguments that violate a documented precondition
    /// (signature length, patch lattice mismatch, shape mismatch, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The autodiff tape produced a non-finite value.
    #[error("non-finite value in node {node} ({context})")]
    NonFinite { node: usize, context: String },
}

fn path_suffix(path: &Option<String>) -> String {
    match path {
        Some(p) => format!(" in {p}"),
        None => String::new(),
    }
}

impl Error {
    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            detail: detail.into(),
        }
    }

    pub fn format_in(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: Some(path.into()),
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
