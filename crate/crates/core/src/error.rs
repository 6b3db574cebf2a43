//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}` (supported: mnist, cifar10, cifar100)")]
    UnknownDataset(String),

    #[error("dataset source file missing: {path}")]
    MissingSource { path: PathBuf },

    #[error("malformed dataset file {path}: {reason}")]
    MalformedSource { path: PathBuf, reason: String },

    #[error("class {class} has no examples in the dataset")]
    EmptyClass { class: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("cannot split {dataset_len} samples across {num_clients} clients")]
    TooManyClients {
        dataset_len: usize,
        num_clients: usize,
    },

    #[error("window size {s} invalid for a {height}x{width} image")]
    InvalidWindowSize {
        s: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("training diverged: {context} became non-finite")]
    Divergence { context: String },

    #[error("mixup coefficient {0} outside [0, 1]")]
    InvalidMixCoefficient(f64),

    #[error("accuracy degradation ratio undefined: baseline accuracy is zero")]
    ZeroBaselineAccuracy,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("extractor weight file {path}: {reason}")]
    BadWeightFile { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("config encode error: {0}")]
    TomlEncode(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
