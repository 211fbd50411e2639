use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the engine, the model, or the data layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: output extent along axis {axis} would be zero")]
    ZeroExtent { op: &'static str, axis: usize },

    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{name}: non-finite value at flat index {index}")]
    NonFiniteTensor { name: String, index: usize },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("non-positive voxel spacing {0:?}")]
    Spacing([f32; 3]),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by a non-finite value in a forward pass.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteTensor { .. })
    }

    /// True for errors caused by malformed files, manifests or cases.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Version(_)
                | Error::Truncated(_)
                | Error::Spacing(_)
                | Error::Data(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
