use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("clip has no frames")]
    EmptyClip,
    #[error("batch of size {0} is too small for a contrastive loss (need at least 2)")]
    DegenerateBatch(usize),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("duplicate gallery id {0}")]
    DuplicateId(String),
    #[error("ground-truth id {0} is not in the gallery")]
    MissingGroundTruth(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible layout for cell {0}")]
    InfeasibleLayout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
