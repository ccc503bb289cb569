use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum VistaError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid activation vector: {0}")]
    InvalidVector(String),

    #[error("duplicate item id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },

    #[error("latent {latent} out of range for dimensionality {dim}")]
    LatentOutOfRange { latent: u32, dim: u32 },

    #[error("no item activates latent {0}")]
    EmptySlice(u32),

    #[error("zero-norm activation vector")]
    ZeroNorm,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("curve fit did not converge: {0}")]
    FitFailure(String),

    #[error("layout diverged: {0}")]
    Diverged(String),

    #[error("degenerate bounds: {0}")]
    DegenerateBounds(String),

    #[error("no density cell exceeds the threshold {threshold}")]
    NoDenseRegion { threshold: f64 },

    #[error("region {region} at {bbox:?} lies outside the {width}x{height} panorama")]
    RegionOutOfBounds {
        region: String,
        bbox: [u32; 4],
        width: u32,
        height: u32,
    },

    #[error("render backend unreachable after {attempts} attempt(s): {message}")]
    Connection { attempts: u32, message: String },

    #[error("render protocol violation after {attempts} attempt(s): {message}")]
    Protocol { attempts: u32, message: String },

    #[error("panorama dimension mismatch after {attempts} attempt(s): expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        attempts: u32,
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VistaError>,
    },
}

impl VistaError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        VistaError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors raised while a pipeline stage was running.
    pub fn is_stage_failure(&self) -> bool {
        matches!(self, VistaError::Stage { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VistaError::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = VistaError> = std::result::Result<T, E>;
