use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image too narrow for scheme: {lines} lines, stride {stride} needs at least {needed}")]
    ImageTooNarrow {
        lines: usize,
        stride: usize,
        needed: usize,
    },

    #[error("inconsistent decimation geometry: {0}")]
    InconsistentGeometry(String),

    #[error("incomparable images: {a_lines}x{a_depth} vs {b_lines}x{b_depth}")]
    IncomparableImages {
        a_lines: usize,
        a_depth: usize,
        b_lines: usize,
        b_depth: usize,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("kernel/scheme mismatch: model kernel {kernel} cannot serve scheme {scheme}")]
    SchemeMismatch { kernel: usize, scheme: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("corpus smaller than 3 images ({0} given)")]
    CorpusTooSmall(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
