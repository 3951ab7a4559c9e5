use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyDimension { rows: usize, cols: usize },

    #[error("expected {expected} entries for the given shape, got {actual}")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("low-rank factors do not conform: up has {up_cols} columns, down has {down_rows} rows")]
    FactorMismatch { up_cols: usize, down_rows: usize },

    #[error("rank {rank} exceeds min({rows}, {cols})")]
    RankTooLarge { rank: usize, rows: usize, cols: usize },

    #[error("scale must be finite and non-negative, got {0}")]
    InvalidScale(f64),

    #[error("SVD failed to converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },

    #[error("matrix is rank deficient at column {column} (|r_jj| / max |r_ii| = {ratio:e})")]
    RankDeficient { column: usize, ratio: f64 },

    #[error("requested subspace rank {requested} exceeds numerical rank {available}")]
    SubspaceRankTooLarge { requested: usize, available: usize },

    #[error("subspace rank must be at least 1")]
    ZeroSubspaceRank,

    #[error(
        "the QR path spans the full row space of the style factor (rank {rank}); \
         a strict top-{requested} subspace needs singular ordering, use the SVD path"
    )]
    QrNeedsFullRank { requested: usize, rank: usize },

    #[error("projection strength mu must be finite and >= 0, got {0}")]
    InvalidMu(f64),

    #[error("perturbation epsilon must be finite and >= 0, got {0}")]
    InvalidEpsilon(f64),

    #[error("direction index {index} out of range for rank {rank}")]
    DirectionOutOfRange { index: usize, rank: usize },

    #[error("style update is zero; its direction is undefined")]
    ZeroStyle,

    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),

    #[error(
        "checkpoints share no layer keys; nearest misses: content {content_near:?}, style {style_near:?}"
    )]
    NoSharedLayers {
        content_near: Vec<String>,
        style_near: Vec<String>,
    },

    #[error("layer `{0}` has no counterpart in the other checkpoint")]
    UnpairedLayer(String),

    #[error("output layer key `{0}` produced twice")]
    DuplicateLayer(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
