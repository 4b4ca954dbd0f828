use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (entry ({row}, {col}) differs)")]
    NotSymmetric { row: usize, col: usize },
    #[error("eigen-decomposition did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("constraint matrix is not positive definite after ridging")]
    SingularB,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("data rank too low: no eigenvalue above floor {floor:e}")]
    RankDeficient { floor: f64 },
    #[error("too few samples: need more than {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("unsupported video format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("video has no frames: {0}")]
    EmptyVideo(PathBuf),
    #[error("rescaled size degenerates below one pixel")]
    DegenerateSize,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate manifest path: {0}")]
    DuplicatePath(PathBuf),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid cube spec: {0}")]
    InvalidCubeSpec(String),
    #[error("no video is large enough for the requested cube size")]
    TooSmallVideo,

    #[error("all temporal variations are zero")]
    AllZeroVariations,
    #[error("cannot drop {n_drop} of {available} solutions")]
    AllDropped { n_drop: usize, available: usize },

    #[error("filter ({filter_h}x{filter_w}) larger than frame ({frame_h}x{frame_w})")]
    FilterLargerThanFrame {
        filter_h: usize,
        filter_w: usize,
        frame_h: usize,
        frame_w: usize,
    },
    #[error("need at least two frames for variation maps, got {0}")]
    TooFewFrames(usize),
    #[error("pooling volume larger than feature maps")]
    VolumeLargerThanMaps,
    #[error("invalid pooling spec: {0}")]
    InvalidPoolSpec(String),

    #[error("feature set is empty")]
    EmptyFeatureSet,
    #[error("missing feature set {0}")]
    MissingSet(usize),
    #[error("invalid GMM configuration: {0}")]
    InvalidGmm(String),

    #[error("training data has a single class")]
    SingleClass,
    #[error("training data is empty")]
    EmptyData,
    #[error("too few videos: {0}")]
    TooFewVideos(String),
    #[error("class {class} has {have} videos, needs more than {need}")]
    InsufficientPerClass { class: String, have: usize, need: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite => "NonFinite",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::SingularB => "SingularB",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::CorruptHeader { .. } => "CorruptHeader",
            Error::EmptyVideo(_) => "EmptyVideo",
            Error::DegenerateSize => "DegenerateSize",
            Error::EmptyDataset => "EmptyDataset",
            Error::DuplicatePath(_) => "DuplicatePath",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::InvalidCubeSpec(_) => "InvalidCubeSpec",
            Error::TooSmallVideo => "TooSmallVideo",
            Error::AllZeroVariations => "AllZeroVariations",
            Error::AllDropped { .. } => "AllDropped",
            Error::FilterLargerThanFrame { .. } => "FilterLargerThanFrame",
            Error::TooFewFrames(_) => "TooFewFrames",
            Error::VolumeLargerThanMaps => "VolumeLargerThanMaps",
            Error::InvalidPoolSpec(_) => "InvalidPoolSpec",
            Error::EmptyFeatureSet => "EmptyFeatureSet",
            Error::MissingSet(_) => "MissingSet",
            Error::InvalidGmm(_) => "InvalidGmm",
            Error::SingleClass => "SingleClass",
            Error::EmptyData => "EmptyData",
            Error::TooFewVideos(_) => "TooFewVideos",
            Error::InsufficientPerClass { .. } => "InsufficientPerClass",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::BadModel(_) => "BadModel",
            Error::Io(_) => "IoError",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}
