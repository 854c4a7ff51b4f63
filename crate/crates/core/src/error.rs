use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("degenerate alpha_bar {0}")]
    DegenerateAlphaBar(f64),

    #[error("invalid alpha_bar ordering: ab_prev={ab_prev} < ab_t={ab_t}")]
    InvalidAbOrdering { ab_t: f64, ab_prev: f64 },

    #[error("spatial dims {dims:?} not divisible by {factor}")]
    IndivisibleShape { dims: [usize; 3], factor: usize },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("training diverged (epoch {epoch:?}, last good epoch {last_good_epoch:?})")]
    TrainingDiverged {
        epoch: Option<usize>,
        last_good_epoch: Option<usize>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },

    #[error("direction matrix is not orthonormal")]
    NonOrthonormal,

    #[error("degenerate voxel spacing {0:?}")]
    DegenerateSpacing([f64; 3]),

    #[error("mask has no nonzero voxels")]
    EmptyMask,

    #[error("volume is constant (min == max == {0})")]
    ConstantVolume(f64),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("covariance is not positive semidefinite (min eigenvalue {0})")]
    NotPsd(f64),

    #[error("empty sample")]
    EmptySample,

    #[error("need at least {needed} real volumes, got {got}")]
    InsufficientRealData { needed: usize, got: usize },

    #[error("no candidates to search")]
    EmptyCandidates,

    #[error("unknown feature extractor {0:?}")]
    UnknownExtractor(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
