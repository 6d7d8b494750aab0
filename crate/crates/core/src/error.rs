use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank { op: &'static str, expected: &'static str, got: usize },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d: kernel must be square with odd size, got {0:?}")]
    KernelShape(Vec<usize>),
    #[error("pow: base {base} is not positive (exponent {exponent})")]
    InvalidPow { base: f64, exponent: f64 },
    #[error("{0}: input requires grad but the op has no backward")]
    NotDifferentiable(&'static str),
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Failures reading or validating a weight/map file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("layer {name}: {msg}")]
    Layer { name: String, msg: String },
    #[error("architecture mismatch: file has {found}, expected {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("image {height}x{width} is too small: need at least {min}x{min} for {stages} upsampling stages")]
    TooSmall { height: usize, width: usize, min: usize, stages: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
