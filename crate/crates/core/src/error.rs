use thiserror::Error;

/// Errors produced by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("inverse transform left an imaginary residue of {rms:e} RMS (non-Hermitian spectrum)")]
    NonHermitian { rms: f64 },

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("voxels inside the reconstruction region are not covered by any cube ({uncovered} voxels)")]
    Uncovered { uncovered: usize },

    #[error("fitting diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("unsupported MRC mode {0} (only mode 2, 32-bit float, is supported)")]
    UnsupportedMode(i32),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonHermitian { .. }
            | Error::ZeroVariance
            | Error::Divergence { .. }
            | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
