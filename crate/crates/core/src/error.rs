use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prompt contains no words")]
    EmptyPrompt,

    #[error("sub-prompt {0:?} does not occur as a contiguous word sequence of the prompt")]
    SubPromptNotFound(String),

    #[error("regions {first} and {second} of character {character} share word {word}")]
    OverlappingSpans {
        character: usize,
        first: String,
        second: String,
        word: usize,
    },

    #[error("region {label} appears more than once for character {character}")]
    DuplicateRegion { character: usize, label: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("no adapter features for region {0}")]
    MissingRegionFeatures(String),

    #[error("region [{x1},{x2},{y1},{y2}] is degenerate for a {width}x{height} image")]
    DegenerateRegion {
        x1: usize,
        x2: usize,
        y1: usize,
        y2: usize,
        width: usize,
        height: usize,
    },

    #[error("image {width}x{height} is not divisible by patch factor {factor}")]
    NotDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },

    #[error("attention probe is disabled")]
    ProbeDisabled,

    #[error("no attention records to aggregate")]
    EmptyRecords,

    #[error("word span is empty")]
    EmptySpan,

    #[error("no attention maps inside timestep window [{lo},{hi}]")]
    EmptyWindow { lo: usize, hi: usize },

    #[error("no cell above threshold {gamma} for {label}")]
    NoCellAboveThreshold { label: String, gamma: f32 },

    #[error("segmentation failed for character {character}: {source}")]
    SegmentationFailed {
        character: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad tensor container magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor container version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported tensor dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("tensor payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyPrompt => "EmptyPrompt",
            Error::SubPromptNotFound(_) => "SubPromptNotFound",
            Error::OverlappingSpans { .. } => "OverlappingSpans",
            Error::DuplicateRegion { .. } => "DuplicateRegion",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::MissingRegionFeatures(_) => "MissingRegionFeatures",
            Error::DegenerateRegion { .. } => "DegenerateRegion",
            Error::NotDivisible { .. } => "NotDivisible",
            Error::ProbeDisabled => "ProbeDisabled",
            Error::EmptyRecords => "EmptyRecords",
            Error::EmptySpan => "EmptySpan",
            Error::EmptyWindow { .. } => "EmptyWindow",
            Error::NoCellAboveThreshold { .. } => "NoCellAboveThreshold",
            Error::SegmentationFailed { .. } => "SegmentationFailed",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::BadMagic(_) => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::Format { .. } => "Format",
            Error::Io(_) => "Io",
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
