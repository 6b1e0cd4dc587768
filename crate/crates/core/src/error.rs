//! Error type shared by every module in the crate.

use std::fmt;

/// Errors produced while building grids, assembling systems, or running solves.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter was outside its legal range.
    InvalidParameter(String),
    /// Two buffers that must agree in length did not.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A non-finite value surfaced inside an iterative solve.
    NumericalFailure {
        what: &'static str,
        iteration: usize,
    },
    /// A dense reference route was asked for a matrix above its cap.
    DenseCapExceeded { npixels: usize, cap: usize },
    /// Raster I/O failed (file system or codec).
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "dimension mismatch in {what}: expected {expected}, got {got}"),
            Error::NumericalFailure { what, iteration } => {
                write!(f, "numerical failure in {what} at iteration {iteration}")
            }
            Error::DenseCapExceeded { npixels, cap } => {
                write!(f, "dense route refused: {npixels} pixels exceeds cap {cap}")
            }
            Error::Io(msg) => write!(f, "raster i/o: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
