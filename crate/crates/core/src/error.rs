//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by mesh construction, fitting, and IO.
#[derive(Debug, Error)]
pub enum Error {
    /// A size parameter exceeds a hard capacity limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A mesh that must be mirror-symmetric is not.
    #[error("asymmetric mesh: vertex {index} has no mirror partner within tolerance {tol}")]
    AsymmetricMesh { index: usize, tol: f64 },

    /// Array dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Geometric construction failed (degenerate face, missed ray, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Input is degenerate for the requested operation.
    #[error("degenerate input: {0}")]
    Degeneracy(String),

    /// A quaternion that cannot represent a rotation.
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    /// Camera motion insufficient for factorization.
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    /// A numeric failure (NaN/Inf) in a named computation.
    #[error("numeric failure in {term}: {detail}")]
    Numeric { term: String, detail: String },

    /// Dataset or file-content problem.
    #[error("data error: {0}")]
    Data(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numeric(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            detail: detail.into(),
        }
    }
}
