//! Error type shared by all reconstruction modules.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A parameter violates the documented preconditions of an operation.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// The voxel grid is not fully covered by the X-ray cone of every view.
    #[error("geometry coverage: {0}")]
    Coverage(String),

    /// Mismatched array / geometry dimensions.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A NaN or infinity was detected where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A binary or JSON container failed to parse.
    #[error("format: {0}")]
    Format(String),

    /// One or more HQS stages reference a denoiser that was not supplied.
    #[error("missing denoiser(s) for stage id(s): {0:?}")]
    MissingDenoiser(Vec<String>),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
