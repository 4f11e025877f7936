use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("dims {dims:?} are not divisible by {factor}")]
    NotDivisible { dims: [usize; 3], factor: usize },
    #[error("resampling factor {0} is not a power of two >= 2")]
    InvalidFactor(usize),
    #[error("grid has zero variance")]
    ZeroVariance,
    #[error("stride decomposition needs even dims, got {0:?}")]
    OddDimension([usize; 3]),
    #[error("inconsistent stride stack: {0}")]
    InconsistentStack(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload size mismatch: dims imply {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("label {0} is outside the taxonomy")]
    InvalidLabel(u8),
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("template list is empty")]
    EmptyTemplates,
    #[error("requested {requested} templates but the library holds {available}")]
    TooFewTemplates { requested: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sample lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    NoNonzeroDifferences,
    #[error("need more than {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Io(#[from] io::Error),
}
