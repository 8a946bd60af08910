//! Shared foundations: volumes and their on-disk format, the organ registry,
//! synthetic phantoms, segmentation metrics, statistics and dosimetry.

pub mod dosimetry;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod registry;
pub mod stats;
pub mod volume;

pub use error::{CoreError, Result};
pub use registry::{OrganEntry, OrganRegistry, Stratum};
pub use volume::{BoxRegion, Interpolation, LabelMask, Volume3D, VolumeKind};
