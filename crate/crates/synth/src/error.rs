use mpgen_io::FormatError;
use thiserror::Error;

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("footprint-out-of-scene: footprint [{x0:.2}, {x1:.2}] x [{y0:.2}, {y1:.2}] exceeds scene bounds")]
    FootprintOutOfScene { x0: f64, x1: f64, y0: f64, y1: f64 },

    #[error("degenerate-link: receiver at {0:?} coincides with the transmitter")]
    DegenerateLink([f64; 3]),

    #[error("unknown-param: {0:?}")]
    UnknownParam(String),

    #[error("invalid-pose: {0}")]
    InvalidPose(String),

    #[error("invalid-input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
