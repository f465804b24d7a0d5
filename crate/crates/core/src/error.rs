use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("expected a {expected}-dimensional tensor, found shape {found:?}")]
    Rank { expected: usize, found: Vec<usize> },

    #[error("invalid tensor shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("patch size {patch} does not fit inside a {height}x{width} image")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("weights imply patch height {height} but patch width {width}")]
    InconsistentPatchSize { height: usize, width: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad magic number in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("file length {len} is not a multiple of the record length {record}")]
    RecordLength { len: usize, record: usize },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
