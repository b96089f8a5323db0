//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not an RVOL file: magic bytes missing")]
    RvolMagic,

    #[error("malformed RVOL header: {0}")]
    RvolHeader(String),

    #[error("truncated RVOL payload: {got} bytes is not a whole number of {elem_size}-byte elements")]
    RvolTruncated { got: usize, elem_size: usize },

    #[error("RVOL dims/payload mismatch: header declares {expected} elements, payload holds {got}")]
    RvolLengthMismatch { expected: usize, got: usize },

    #[error("RVOL dtype mismatch: file holds {found}, expected {expected}")]
    RvolDtype {
        found: &'static str,
        expected: &'static str,
    },

    #[error("volume dims {dims:?} too small: {reason}")]
    DimsTooSmall { dims: (usize, usize, usize), reason: String },

    #[error("mask is not binary: value {value} at voxel index {index}")]
    NonBinaryMask { value: u32, index: usize },

    #[error("mask has no background voxel: distance transform undefined")]
    AllForeground,

    #[error("mask has no foreground voxel")]
    EmptyForeground,

    #[error("invalid neighbor count k={k} for {n} keypoints (need 1 <= k < n)")]
    InvalidK { k: usize, n: usize },

    #[error("keypoint count {n} exceeds the dense-graph limit of {max}")]
    TooManyKeypoints { n: usize, max: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("volume dims mismatch: {a:?} vs {b:?}")]
    DimMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },

    #[error("label {label} out of range (expected 0..={max})")]
    LabelOutOfRange { label: usize, max: usize },

    #[error("no voxels to select anchors from")]
    EmptyVoxelSet,

    #[error("zero-norm vector in cosine similarity (norm < 1e-12)")]
    ZeroNorm,

    #[error("no gradient recorded for parameter {0:?}")]
    MissingGradient(String),

    #[error("unknown parameter {0:?}")]
    MissingParam(String),

    #[error("parameter {0:?} already exists")]
    DuplicateParam(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {context} at iteration {iteration}: ce={ce}, scl={scl}")]
    NonFiniteLoss {
        context: &'static str,
        iteration: usize,
        ce: f64,
        scl: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}
