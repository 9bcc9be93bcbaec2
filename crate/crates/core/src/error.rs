//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not on the tape (detached or from another recording)")]
    DetachedTensor,

    #[error("backward already ran on this tape; build a fresh recording")]
    TapeConsumed,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("duplicate item id {0} in corpus")]
    DuplicateItem(u64),

    #[error("cache miss for item ids {0:?}")]
    CacheMiss(Vec<u64>),

    #[error("stale cache: cache fingerprint {cache:#018x} != model fingerprint {model:#018x}")]
    StaleCache { cache: u64, model: u64 },

    #[error("pipeline unsupported for model {0}: no decoupled attention stage")]
    UnsupportedModel(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite (grad norm {grad_norm:.3e}, lr {lr:.3e})")]
    TrainDiverged { step: usize, grad_norm: f64, lr: f64 },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("log-scale plot requires positive values; offending row: model={model}, axis_value={axis_value}, value={value}")]
    NonPositiveLogValue {
        model: String,
        axis_value: u64,
        value: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
