use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("noise standard deviation must be >= 0, got {0}")]
    NegativeStd(f32),
    #[error("poisson rate must be > 0, got {0}")]
    InvalidLambda(f32),
    #[error("poisson noise needs a non-negative signal, found {0}")]
    NegativeSignal(f32),

    #[error("patch size must be odd and >= 1, got {0}")]
    EvenPatchSize(usize),
    #[error("coordinate ({0}, {1}) out of bounds")]
    OutOfBounds(usize, usize),
    #[error("k = {k} too large for an image with {pixels} pixels")]
    KTooLarge { k: usize, pixels: usize },
    #[error("index {index} outside 1..={k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("every pixel of the sample is excluded by the dissimilarity mask")]
    AllPixelsExcluded,

    #[error("input spatial size {0}x{1} is below the 4x4 minimum")]
    ShapeTooSmall(usize, usize),
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("crop size {crop} exceeds image size {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("dataset is missing the {0} role required by this mode")]
    RoleMissing(&'static str),
    #[error("{skipped} of {total} samples were skipped as degenerate")]
    DegenerateSampleSkipped { skipped: usize, total: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
