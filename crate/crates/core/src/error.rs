use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds { x: u32, y: u32, width: u32, height: u32 },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("parameter layout mismatch: expected {expected} scalars, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing image for view {view} at time {time}: {path}")]
    MissingImage { view: usize, time: u32, path: PathBuf },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("time index {0} not present in archive")]
    MissingTimestep(u32),

    #[error("time index {0} already present in archive")]
    DuplicateTimestep(u32),

    #[error("checksum mismatch in record for time index {time}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { time: u32, stored: u32, computed: u32 },

    #[error("timestep {time} failed: {source}")]
    Timestep {
        time: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical pipeline (divergence, NaN/inf).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => true,
            Error::Timestep { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
