use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor construction and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

/// Errors raised by the smoke solver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParams(String),
    #[error("explicit diffusion unstable: nu*dt/dx^2 = {value} exceeds 0.25")]
    UnstableDiffusion { value: f64 },
    #[error("pressure solve did not converge in {iterations} iterations (residual {residual:e})")]
    PressureSolve { iterations: usize, residual: f64 },
}

/// Errors raised by the diffusion chain.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("query time {tau} outside [0, {total_time}]")]
    TimeOutOfRange { tau: f64, total_time: f64 },
    #[error("embedding dimension must be even and >= 2, got {0}")]
    OddEmbedding(usize),
    #[error("denoiser produced a non-finite value at step {t}")]
    NonFiniteDenoiser { t: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by the U-Net builder and forward pass.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid U-Net config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: String },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Errors raised by the tensor file format and the dataset pipeline.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"FDTN\"")]
    MagicMismatch { found: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
    #[error("dtype mismatch: file holds {found}, caller asked for {expected}")]
    DTypeMismatch {
        found: &'static str,
        expected: &'static str,
    },
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("dimensions {dims:?} overflow the addressable element count")]
    DimensionOverflow { dims: Vec<u32> },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("hash mismatch for {file}: manifest {expected}, on disk {found}")]
    HashMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("scene {scene}: {source}")]
    Scene {
        scene: usize,
        #[source]
        source: FluidError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("cosine schedule step {step} outside 0..={total}")]
    LrStepOutOfRange { step: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Errors raised by the evaluation metrics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tau keys differ; missing in predictions {missing_pred:?}, missing in truth {missing_truth:?}")]
    KeyMismatch {
        missing_pred: Vec<f64>,
        missing_truth: Vec<f64>,
    },
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}
