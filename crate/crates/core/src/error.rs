use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("centroid memory is empty")]
    EmptyMemory,

    #[error("large-margin loss needs at least 2 classes, got {0}")]
    NoNegativeCentroid(usize),

    #[error("class {class} has no training examples")]
    EmptyClass { class: usize },

    #[error("source class {class} holds {available} examples, {needed} required")]
    ClassTooSmall {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("open class {0} overlaps the closed class set")]
    OpenClassOverlap(usize),

    #[error("batch size {batch_size} not divisible by classes_per_batch {classes_per_batch}")]
    BatchDivisibility {
        batch_size: usize,
        classes_per_batch: usize,
    },

    #[error("classifier row {0} has zero norm")]
    ZeroNormClassifierRow(usize),

    #[error("malformed probability distribution: {0}")]
    MalformedDistribution(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty grid")]
    EmptyGrid,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing {0}")]
    MissingArtifact(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
