//! Dual-grid CFD-DEM coupling on logical ranks.
//!
//! Particles live on a coarse "bulk" grid whose partition is shared with the DEM
//! decomposition, so particle-to-grid projection and drag evaluation never leave
//! a rank. The fluid is solved on an independent fine grid with its own
//! partition; the two grids are bridged by a static sparse communication matrix
//! that moves fields either through a root rank or directly between the ranks
//! that share overlapping cells.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the drivers use.

pub mod cfd;
pub mod coupling;
pub mod dem;
pub mod error;
pub mod interp;
pub mod mesh;
pub mod partition;
pub mod real;
pub mod sum;
pub mod transport;

pub use error::{Error, Result};
pub use real::Real;
pub use sum::{exact_sum, ExactSum};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Grid = mesh::UniformGrid<f64>;
pub type Grid32 = mesh::UniformGrid<f32>;
pub type Field = mesh::GridField<f64>;
pub type Layout = mesh::LocalLayout<f64>;
