use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid floor plan: {0}")]
    InvalidFloor(String),

    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),

    #[error("class multisets differ: class {class} has {source_count} source and {target_count} target objects")]
    ClassMultisetMismatch {
        class: usize,
        source_count: usize,
        target_count: usize,
    },

    #[error("scene does not match the {variant} layout: {reason}")]
    VariantMismatch { variant: String, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got a {rows}x{cols} tensor")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("class id {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("shape id {shape} out of range for {shape_count} shapes")]
    ShapeOutOfRange { shape: usize, shape_count: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parameters do not match the model config: {0}")]
    UntrainedParams(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("scene has {have} objects, need at least {need}")]
    TooFewObjects { have: usize, need: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("mismatched scene sets: {0}")]
    MismatchedSets(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
