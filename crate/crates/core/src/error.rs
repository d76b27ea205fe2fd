use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("video has {have} frames, window needs {need}")]
    TooFewFrames { have: usize, need: usize },

    #[error("crop side {crop} exceeds frame size {height}x{width}")]
    CropTooLarge { crop: usize, height: usize, width: usize },

    #[error("invalid clip: {0}")]
    InvalidClip(String),

    #[error("unsupported attack kind `{0}`")]
    UnsupportedAttack(String),

    #[error("invalid attack parameter: {0}")]
    InvalidAttack(String),

    #[error("non-finite attention logit in {0}")]
    NonFiniteLogits(&'static str),

    #[error("cosine similarity undefined for a zero vector ({0})")]
    ZeroVector(&'static str),

    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("LoRA rank {rank} is invalid for a {rows}x{cols} layer")]
    RankTooLarge { rank: usize, rows: usize, cols: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("AUC needs at least one positive and one negative ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint config mismatch: checkpoint {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
