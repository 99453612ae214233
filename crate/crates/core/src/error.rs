use thiserror::Error;

/// Errors surfaced by the lab's fallible operations.
///
/// Shape mismatches between matrices and vectors are programming errors and
/// panic instead; everything here is a recoverable condition of the inputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("SVD did not converge after {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },

    #[error("objective returned a non-finite value during finite differencing")]
    NonFiniteEval,

    #[error("point {index} has zero norm and cannot be projected to the sphere")]
    ZeroNormPoint { index: usize },

    #[error("no points in cell (class {class}, component {component})")]
    EmptyCell { class: usize, component: usize },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("IDX file {path} truncated: need {need} bytes, have {have}")]
    IdxTruncated {
        path: String,
        need: usize,
        have: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("CSV parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("dataset {found:#018x} is not the snapshot's reference dataset {expected:#018x}")]
    ReferenceMismatch { expected: u64, found: u64 },

    #[error("snapshot has no reference dataset attached")]
    NoReference,

    #[error("piecewise function is not convex: slope decreases across breakpoint {index}")]
    NotConvex { index: usize },

    #[error("phi has no positive slope jump at zero")]
    NoKinkAtZero,

    #[error("checkpoint is corrupt: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
