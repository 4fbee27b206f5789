use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing NIfTI-1 files.
#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("bad NIfTI magic {0:?}, expected \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("bad sizeof_hdr {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: dim = {0:?}")]
    UnsupportedDims([i16; 8]),
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("invalid vox_offset {0}")]
    BadVoxOffset(f32),
    #[error("non-positive spacing {0:?}")]
    BadSpacing([f32; 3]),
    #[error("label file must be uint8, found datatype code {0}")]
    NotLabelData(i16),
}

/// Errors raised while parsing NPY files.
#[derive(Debug, Error)]
pub enum NpyError {
    #[error("bad NPY magic")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("fortran_order=True is not supported")]
    FortranOrder,
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDescr(String),
    #[error("scalar (rank 0) arrays are not supported")]
    ScalarArray,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabel { value: u8, index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("image has no nonzero voxels")]
    EmptyForeground,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite gradient for parameter {name} at step {step} (element {index}, value {value})")]
    NonFiniteGradient {
        name: String,
        step: u64,
        index: usize,
        value: f64,
    },
    #[error("missing modality file for case {case}: {path}")]
    MissingModality { case: String, path: PathBuf },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },
    #[error("{path}: {source}")]
    Npy {
        path: PathBuf,
        #[source]
        source: NpyError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the input data rather than by the caller's arguments.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
