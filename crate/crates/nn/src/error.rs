use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {dims:?} are not divisible by {factor}")]
    NotDivisible { dims: [usize; 3], factor: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("target is not one-hot at voxel {0}")]
    NotOneHot(usize),
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checkpoint descriptor: {0}")]
    Descriptor(String),
    #[error("checkpoint does not match the network: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Core(#[from] lobeseg_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
