//! File formats: geometry manifests, raw volumes, projection stacks, and
//! procedural phantoms.

pub mod manifest;
pub mod phantom;
pub mod projections_io;
pub mod volume_io;

pub use manifest::{parse_manifest, GeometryManifest, GeometrySpec};
pub use phantom::{make_phantom, PhantomKind};
pub use projections_io::{read_projections, write_projections};
pub use volume_io::{read_volume, write_volume};
