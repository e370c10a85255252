use std::path::PathBuf;

use mpgen_io::{Checkpoint, FormatError};
use mpgen_synth::SynthError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("bad-patching: {height}x{width} is not divisible by patch size {patch}")]
    BadPatching { height: usize, width: usize, patch: usize },
    #[error("empty-codebook")]
    EmptyCodebook,
    #[error("codebook-shape-mismatch: source {source_k}x{source_nz}, target {target_k}x{target_nz}")]
    CodebookShapeMismatch { source_k: usize, source_nz: usize, target_k: usize, target_nz: usize },
    #[error("bad-frequency: {0} Hz")]
    BadFrequency(f64),
    #[error("unknown-task: {0}")]
    UnknownTask(String),
    #[error("duplicate-task: {0}")]
    DuplicateTask(String),
    #[error("missing-decoder: {0}")]
    MissingDecoder(String),
    #[error("unknown-provider: {0}")]
    UnknownProvider(String),
    #[error("incomplete-snapshot: {id} lacks map {task}")]
    IncompleteSnapshot { id: String, task: String },
    #[error("degenerate-denominator")]
    DegenerateDenominator,
    #[error("diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Option<Box<Checkpoint>> },
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}
