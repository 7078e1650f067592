//! Volumes, phantoms, the PET system model and image reconstruction.

pub mod error;
pub mod eval;
pub mod filter;
pub mod guided;
pub mod io;
pub mod osem;
pub mod phantom;
pub mod projector;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use volume::{Slice2D, Volume, VolumeKind};
