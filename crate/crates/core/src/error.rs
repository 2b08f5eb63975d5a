use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data failed validation (non-binary targets, class-count mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// An API was used out of contract, e.g. a second backward pass on one tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    /// Annotations that point at images or categories that do not exist.
    #[error("{} dangling annotation reference(s): {}", .0.len(), format_dangling(.0))]
    DanglingReferences(Vec<DanglingReference>),

    #[error("checkpoint error in {field}: {message}")]
    Checkpoint { field: String, message: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("bundle error in {field}: {message}")]
    Bundle { field: String, message: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (learning rate {learning_rate})")]
    NonFinite {
        loss: f64,
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One annotation whose `image_id` or `category_id` is not declared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DanglingReference {
    pub annotation_index: usize,
    pub image_id: Option<u64>,
    pub category_id: Option<u64>,
}

fn format_dangling(refs: &[DanglingReference]) -> String {
    refs.iter()
        .map(|r| {
            let mut parts = Vec::new();
            if let Some(id) = r.image_id {
                parts.push(format!("unknown image_id {id}"));
            }
            if let Some(id) = r.category_id {
                parts.push(format!("unknown category_id {id}"));
            }
            format!("annotations[{}]: {}", r.annotation_index, parts.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn bundle(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Bundle {
            field: field.into(),
            message: message.into(),
        }
    }
}
