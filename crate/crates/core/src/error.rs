//! Crate-wide error type.

use thiserror::Error;

/// Errors reported by the geometry, projection, reconstruction, and IO layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A ray direction had zero norm.
    #[error("ray direction has zero norm")]
    ZeroDirection,

    /// A ray was (numerically) parallel to the detector plane.
    #[error("ray is parallel to the detector plane (|n.d|/(|n||d|) < {tol})")]
    RayParallelToDetector { tol: f64 },

    /// A point handed to the pixel transform was not on the detector plane.
    #[error("point is {distance} mm off the detector plane (tolerance {tol})")]
    PointOffDetectorPlane { distance: f64, tol: f64 },

    /// A view index outside 1..=views was requested.
    #[error("view index {index} outside 1..={views}")]
    ViewIndexOutOfRange { index: usize, views: usize },

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Array shapes that must agree did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Photon levels must satisfy I0 > I1 >= 0.
    #[error("invalid photon levels: i0 = {i0}, i1 = {i1} (need i0 > i1 >= 0)")]
    InvalidPhotonLevels { i0: f64, i1: f64 },

    /// Reconstruction from a non-uniformly sampled orbit was requested.
    #[error("projection angles are not uniformly spaced: {0}")]
    NonUniformAngles(String),

    /// Too few views for the requested reconstruction.
    #[error("need at least {needed} views, got {got}")]
    TooFewViews { needed: usize, got: usize },

    /// Iterative reconstruction diverged.
    #[error("SART diverged: residual grew {ratio:.2}x over its initial value at iteration {iteration}")]
    SartDiverged { iteration: usize, ratio: f64 },

    /// Manifest parsing or validation failed.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A raw data file did not match its sidecar metadata.
    #[error("file {path}: expected {expected} bytes, found {got}")]
    FileSize {
        path: String,
        expected: u64,
        got: u64,
    },

    /// Checkpoint container was malformed or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying IO failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
