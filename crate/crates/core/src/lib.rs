//! Desk-scale cone-beam CT laboratory.
//!
//! The crate covers the full measurement-to-volume chain for a circular-orbit
//! cone-beam scanner: projection geometry, digitally reconstructed radiographs,
//! photon-count simulation, classical reconstruction (FDK and SART), a
//! pixel-aligned feature back projection path with a small trainable
//! encoder/decoder, and volumetric image-quality metrics.
//!
//! Conventions used throughout:
//!
//! * World units are millimetres, attenuation is per millimetre.
//! * The rotation axis is z, the orbit plane is z = 0, and the volume is
//!   centred on the isocenter.
//! * Angles in configuration structs are degrees; radians appear only inside
//!   pose construction.
//! * Voxel and pixel storage is channel-major, then x-fastest.

pub mod classical;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod projector;
pub mod volume;

pub(crate) mod math;
pub(crate) mod rng;

pub use error::Error;
pub use geometry::{Aabb, Ray, ScanConfig, ViewPose};
pub use projector::{PhotonRaster, ProjectionStack};
pub use volume::{ImageGrid, Volume};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
