use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("log of non-positive value {value} at element {index} (tape node {node}, input from {input_op})")]
    NonPositiveLog {
        node: usize,
        input_op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("no labeled pixels available for {0}")]
    NoLabeledPixels(&'static str),

    #[error("class id {id} out of range for {classes} classes in {context}")]
    UnknownClass {
        id: u8,
        classes: usize,
        context: String,
    },

    #[error("missing label file {0}")]
    MissingLabel(PathBuf),

    #[error("prediction contains the ignore id at pixel {0}")]
    IgnoreInPrediction(usize),

    #[error("split {0} carries no labels")]
    Unlabeled(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: non-finite {component} at {stage} iteration {iteration} (batch {batch})")]
    Diverged {
        component: String,
        stage: String,
        iteration: usize,
        batch: String,
    },

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

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
