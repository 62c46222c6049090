use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix data has {got} entries, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("iteration limit of {0} exceeded")]
    IterationLimitExceeded(usize),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("invalid rank {k} for a {rows}x{cols} matrix")]
    InvalidRank { k: usize, rows: usize, cols: usize },

    #[error("{0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("layer {layer} out of range for depth {depth}")]
    InvalidLayer { layer: usize, depth: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("vector is not unit length (norm {0})")]
    NotUnitVector(f64),

    #[error("forward cache is stale (model changed since forward pass)")]
    StaleCache,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("loss became non-finite at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("sketched data is rank deficient (rank {rank} of {ell}, smallest/largest singular value ratio {ratio:e})")]
    RankDeficientSketch { rank: usize, ell: usize, ratio: f64 },

    #[error("degenerate spectrum: gap {gap:e} below threshold {threshold:e}")]
    DegenerateSpectrum { gap: f64, threshold: f64 },

    #[error("not at a critical point: gradient inf-norm {grad:e} exceeds tolerance {tol:e}")]
    NotAtCriticalPoint { grad: f64, tol: f64 },

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("matrix is zero")]
    ZeroMatrix,

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("dimension header does not match data: {0}")]
    DimMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
