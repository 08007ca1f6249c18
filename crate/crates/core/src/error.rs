use std::path::PathBuf;

use crate::sdf::VoxelKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined normal at voxel {0:?}: missing forward neighbor")]
    UndefinedNormal(VoxelKey),

    #[error("degenerate SDF gradient at voxel {0:?}")]
    DegenerateGradient(VoxelKey),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("undistortion did not converge (residual {0:e})")]
    UndistortionDiverged(f64),

    #[error("coordinates ({x}, {y}) outside image of size {width}x{height}")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("voxel has no observations")]
    Unobserved,

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("thin shell is empty")]
    EmptyShell,

    #[error("lighting lattice has no supported nodes")]
    EmptyLattice,

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("non-finite value in residual block {block} ({kind})")]
    NonFinite { block: usize, kind: String },

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    LinearSolve { residual: f64, iterations: usize },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::LinearSolve { .. }
                | Error::Diverged(_)
                | Error::UndistortionDiverged(_)
        )
    }
}
