//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    DimMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    #[error("{op}: expected a {want_rows}x{want_cols} matrix, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        op: &'static str,
        want_rows: usize,
        want_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("svd: matrix too large, min dimension {min_dim} exceeds the small-matrix limit 512")]
    SvdTooLarge { min_dim: usize },

    #[error("svd did not converge after {sweeps} sweeps")]
    SvdNotConverged { sweeps: usize },

    #[error("rel_tol must lie in (0, 1), got {0}")]
    InvalidRelTol(f64),

    #[error("variant {variant} requires an even rank, got {rank}")]
    OddRank { variant: &'static str, rank: usize },

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("variant {variant} requires lambda_init > 0, got {value}")]
    NonPositiveLambda { variant: &'static str, value: f64 },

    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },

    #[error("gradient keys do not match adapter parameters: {detail}")]
    KeyMismatch { detail: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
