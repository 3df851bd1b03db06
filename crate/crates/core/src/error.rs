use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{what}: {total} is not divisible by {parts}")]
    Indivisible {
        what: &'static str,
        total: usize,
        parts: usize,
    },
    #[error("invalid division spec `{spec}`: {reason}")]
    DivisionSpec { spec: String, reason: String },
    #[error("image is {got:?} (channels, height, width) but the model expects {expected:?}")]
    ImageDims {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("camera id {camera} out of range for {num_cameras} cameras")]
    CameraOutOfRange { camera: usize, num_cameras: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("video has no frames")]
    EmptyVideo,
    #[error("feature pyramids have different branch structure")]
    StructureMismatch,
    #[error("no query has a valid cross-camera match")]
    NoValidQueries,
    #[error("invalid configuration: {0}")]
    Config(String),
}
