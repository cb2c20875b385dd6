//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not attached to a tape")]
    DetachedLoss,
    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("interpolation weight {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },
    #[error("loop count mismatch: student has {student}, teacher has {teacher}")]
    LoopCountMismatch { student: usize, teacher: usize },
    #[error("cannot update latent row {row}: newest row is {newest} and chunk mode is off")]
    NonNewestUpdate { row: usize, newest: usize },
    #[error("gate saturation unmet at loop {loop_index}, dim {dim}: z = {z} < required {required}")]
    SaturationUnmet {
        loop_index: usize,
        dim: usize,
        z: f64,
        required: f64,
    },
    #[error("non-finite loss at step {step}: {value}")]
    NumericAbort { step: usize, value: f64 },
    #[error("spectral radius requires a square matrix, got {rows}x{cols}")]
    NonSquareMatrix { rows: usize, cols: usize },
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("cache sharing strategies apply to the per-loop cache model only")]
    StrategyUnsupported,
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
