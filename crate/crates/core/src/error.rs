//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },

    #[error("channel mismatch: kernel expects {expected} input channels, tensor has {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("tensor rank {got} not supported here (expected {expected})")]
    RankMismatch { expected: usize, got: usize },

    #[error("empty or zero-sized input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("upsample target {out_h}x{out_w} is smaller than input {in_h}x{in_w}")]
    UpsampleTooSmall {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },

    #[error("degenerate box with zero area: ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("no annotated boxes: the focal loss normalizer M_foc is zero")]
    NoAnnotatedBoxes,

    #[error("no regression samples: the annotation mask is empty")]
    NoRegressionSamples,

    #[error("predicted heatmap value {value} at flat index {index} is outside (0, 1)")]
    PredictionOutOfRange { value: f64, index: usize },

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("candidate scheme has no scales that fit the sequence")]
    EmptyScheme,

    #[error("result list is empty")]
    EmptyResults,

    #[error("frame union is empty: neither interval covers any integer frame")]
    EmptyFrameUnion,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("optimization diverged at step {step}: non-finite loss or runaway parameters")]
    Diverged { step: usize },

    #[error("validation failed for video '{video}': {message}")]
    Validation { video: String, message: String },

    #[error("tensor file error: {0}")]
    TensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON parse error: {0}")]
    Json(#[from] serde_json::Error),
}
