//! Structured grids, rank-local field storage and grid-to-grid overlaps.

mod field;
mod grid;
mod layout;
mod overlap;

pub use field::{halo_exchange, halo_exchange_all, GridField};
pub use grid::{other_axes, UniformGrid};
pub use layout::{stencil_slot, LocalLayout, NONE, STENCIL};
pub use overlap::{compute_overlaps, CellOverlap, OVERLAP_TOLERANCE};
