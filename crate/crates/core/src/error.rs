use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({left:?} vs {right:?})")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds context length {ctx_len}")]
    ContextOverflow { len: usize, ctx_len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("closed-form accounting assumes ffn_dim = 4 * dim (got ffn_dim {ffn_dim}, dim {dim})")]
    UnsupportedFfnDim { dim: usize, ffn_dim: usize },

    #[error("bad magic: not an RWKVSPEC1 weight file")]
    BadMagic,

    #[error("truncated weight file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("tensor {name}: shape mismatch ({detail})")]
    WeightShape { name: String, detail: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus {} is empty or shorter than one training window", path.display())]
    EmptyCorpus { path: PathBuf },

    #[error("power-law fit needs at least two points with x > 0 and y > 0: {0}")]
    InvalidPoints(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
