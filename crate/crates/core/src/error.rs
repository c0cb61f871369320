use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that an operation cannot combine.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An inconsistent model, layer or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A softmax row with no unmasked entry.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// Malformed input file. `line` is 1-based when known.
    #[error("parse error in {source_name}{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        source_name: String,
        line: Option<usize>,
        message: String,
    },

    /// Data that parses but violates a contract (gold span on padding, id mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Loss or gradient became NaN/inf during training.
    #[error("non-finite loss {loss} at step {step} (batch {batch_id})")]
    NonFinite {
        step: usize,
        batch_id: usize,
        loss: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::InvalidMask(_) => "mask",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "non-finite",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
