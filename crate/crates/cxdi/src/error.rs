//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CxdiError {
    // volume / file format
    #[error("zero-pad target {target:?} smaller than source {source_dims:?}")]
    TargetTooSmall {
        source_dims: [usize; 3],
        target: [usize; 3],
    },
    #[error("bad magic bytes, not a .cxv file")]
    BadMagic,
    #[error("cannot parse .cxv header: {0}")]
    HeaderParse(String),
    #[error("dimension mismatch: header says {expected} values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("grid axes must be even and >= 4, got {0:?}")]
    BadGrid([usize; 3]),

    // datagen
    #[error("superellipsoid semi-axes exceed the grid oversampling budget")]
    ParamsExceedGrid,
    #[error("phase field is constant over the support, rescale undefined")]
    DegenerateSupport,
    #[error("quaternion norm deviates from 1 by more than 1e-9")]
    NonUnitQuaternion,
    #[error("particle has nonzero voxels outside the central half-box")]
    OversamplingViolation,

    // metrics
    #[error("reference array has zero energy")]
    ZeroReference,
    #[error("constant input: Pearson correlation undefined")]
    ConstantInput,

    // iterative
    #[error("shrink-wrap produced an empty support (run diverged)")]
    EmptySupport,
    #[error("non-finite value in reconstruction state at iteration {0}")]
    NonFiniteState(usize),

    // neuralnet / optimize
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a training-mode forward pass")]
    MissingTape,
    #[error("spatial extent must be even for 2x pooling")]
    OddExtent,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),

    // cli / config
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CxdiError>;
