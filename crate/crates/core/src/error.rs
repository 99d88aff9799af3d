use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the exit code the command-line front end maps them
/// to: usage problems, data problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed depth image header: {0}")]
    MalformedHeader(String),
    #[error("truncated depth image payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("depth image has zero width or height")]
    ZeroDimensions,
    #[error("depth image has no valid pixels")]
    NoValidPixels,
    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),
    #[error("mirror map is not an involutive permutation")]
    NonInvolutiveMirror,
    #[error("degenerate face box ({w}x{h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("patch side must be odd, got {0}")]
    EvenPatchSide(usize),
    #[error("normal-equation matrix is rank deficient (size {size}, regularization {gamma})")]
    RankDeficient { size: usize, gamma: f64 },
    #[error("pseudoinverse residual too large: {0:.3e}")]
    PseudoInverseResidual(f64),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("inconsistent landmark sets: {0}")]
    InconsistentLandmarks(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample {index} (yaw {yaw:.1} deg) is outside every pose bin")]
    SampleOutsideBins { index: usize, yaw: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("bad model magic")]
    BadMagic,
    #[error("unsupported model container version {0}")]
    UnsupportedVersion(u16),
    #[error("model kind mismatch: expected {expected}, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("unknown chunk type {kind} in chunk {name}")]
    UnknownChunk { kind: u16, name: String },
    #[error("bad chunk {name}: {reason}")]
    BadChunk { name: String, reason: String },
    #[error("malformed model: {0}")]
    MalformedModel(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 usage, 3 data,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::EvenPatchSide(_) => 2,
            Error::RankDeficient { .. }
            | Error::PseudoInverseResidual(_)
            | Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
