use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav decode error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio file has no sample data")]
    EmptyAudio,
    #[error("invalid audio clip: {0}")]
    InvalidClip(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no speech activity detected")]
    NoActivity,
    #[error("signal too short: {0}")]
    InsufficientDuration(String),
    #[error("utterance too short: envelope of {len} samples is shorter than one frame of {frame}")]
    UtteranceTooShort { len: usize, frame: usize },
    #[error("silent input")]
    SilentInput,
    #[error("degenerate tensor: {0}")]
    DegenerateTensor(String),
    #[error("heterogeneous features: {0}")]
    HeterogeneousFeatures(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("insufficient decay: energy decay curve only reaches {reached_db:.1} dB")]
    InsufficientDecay { reached_db: f64 },
    #[error("degenerate decay: fit span of {span_s:.6} s is shorter than 1 ms")]
    DegenerateDecay { span_s: f64 },
    #[error("all-zero impulse response")]
    ZeroRir,
    #[error("singular design matrix")]
    SingularDesign,
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("invalid regression data: {0}")]
    InvalidData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("model version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numbers in otherwise well-formed input
    /// (silence, degenerate tensors, non-convergence) rather than unreadable input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoActivity
                | Error::InsufficientDuration(_)
                | Error::UtteranceTooShort { .. }
                | Error::SilentInput
                | Error::DegenerateTensor(_)
                | Error::InsufficientDecay { .. }
                | Error::DegenerateDecay { .. }
                | Error::ZeroRir
                | Error::SingularDesign
                | Error::NoConvergence(_)
                | Error::UndefinedCorrelation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
