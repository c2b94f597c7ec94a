use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("layer collapse: pruning would remove every weight of group `{group}`")]
    LayerCollapse { group: String },

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding persisted data. Every validation failure gets its
/// own variant so callers (and tests) can tell them apart.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-monotone mask in round {round}, group `{group}`: pruned weight {index} was restored")]
    NonMonotoneMask {
        round: usize,
        group: String,
        index: usize,
    },

    #[error("round {round}, group `{group}`: pruned position {index} holds nonzero weight {value}")]
    NonzeroPruned {
        round: usize,
        group: String,
        index: usize,
        value: f64,
    },

    #[error("bad header in {path}: expected `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing cell: round {round}, group `{group}`")]
    MissingCell { round: usize, group: String },

    #[error("{0}")]
    Malformed(String),
}
