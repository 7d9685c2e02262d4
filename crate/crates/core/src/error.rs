use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: malformed WAV container: {reason}")]
    MalformedWav { path: PathBuf, reason: String },

    #[error("{path}: unsupported WAV encoding: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },

    #[error("signal has zero power: {0}")]
    ZeroPower(&'static str),

    #[error("noise too short: {noise_len} samples for a {clean_len}-sample clean signal")]
    NoiseTooShort { noise_len: usize, clean_len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("signal shorter than one analysis window ({len} < {win_len})")]
    TooShort { len: usize, win_len: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumFailure { stored: u32, computed: u32 },

    #[error("model file inconsistent with declared architecture: {0}")]
    ArchMismatch(String),

    #[error("training aborted: {0}")]
    TrainAborted(String),

    #[error("corpus error: {0}")]
    Corpus(String),
}
