use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no negative source: a batch needs at least two distinct images")]
    NoNegativeSource,
    #[error("no correspondences in batch")]
    NoCorrespondences,
    #[error("transform is not invertible: {0}")]
    NonInvertible(String),
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("volume {0} is held out and must not be used for training")]
    Leakage(u64),
}

macro_rules! validation {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(alloc::format!($($arg)*))
    };
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

pub(crate) use shape_err;
pub(crate) use validation;
