use crate::real::Real;

use super::grid::UniformGrid;

/// Intersection of one sender cell with one receiver cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOverlap<T: Real> {
    pub sender_cell: usize,
    pub receiver_cell: usize,
    pub volume: T,
}

/// Relative volume below which an intersection is treated as face contact.
pub const OVERLAP_TOLERANCE: f64 = 1e-12;

/// Overlapping index pairs and their interval lengths along one axis.
fn axis_overlaps<T: Real>(
    a: &UniformGrid<T>,
    b: &UniformGrid<T>,
    axis: usize,
) -> Vec<(usize, usize, T)> {
    let na = a.dims()[axis];
    let nb = b.dims()[axis];
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < na && j < nb {
        let (a0, a1) = (a.edge(axis, i), a.edge(axis, i + 1));
        let (b0, b1) = (b.edge(axis, j), b.edge(axis, j + 1));
        let lo = a0.max(b0);
        let hi = a1.min(b1);
        if hi > lo {
            out.push((i, j, hi - lo));
        }
        // advance whichever cell ends first; both on a shared face
        if a1 < b1 {
            i += 1;
        } else if b1 < a1 {
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    out
}

/// Every (sender, receiver) cell pair with a positive intersection volume,
/// sorted by receiver cell then sender cell.
///
/// Volumes are products of per-axis interval intersections, so the result is
/// symmetric: swapping the grids gives the same pairs with bitwise equal volumes.
/// Pairs smaller than [`OVERLAP_TOLERANCE`] times the smaller of the two cell
/// volumes are dropped.
pub fn compute_overlaps<T: Real>(
    sender: &UniformGrid<T>,
    receiver: &UniformGrid<T>,
) -> Vec<CellOverlap<T>> {
    let per_axis: Vec<_> = (0..3).map(|a| axis_overlaps(sender, receiver, a)).collect();
    let threshold =
        T::lit(OVERLAP_TOLERANCE) * sender.cell_volume().min(receiver.cell_volume());
    let mut out = Vec::with_capacity(per_axis[0].len() * per_axis[1].len() * per_axis[2].len());
    for &(sk, rk, lz) in &per_axis[2] {
        for &(sj, rj, ly) in &per_axis[1] {
            for &(si, ri, lx) in &per_axis[0] {
                let volume = lx * ly * lz;
                if volume > threshold {
                    out.push(CellOverlap {
                        sender_cell: sender.index([si, sj, sk]),
                        receiver_cell: receiver.index([ri, rj, rk]),
                        volume,
                    });
                }
            }
        }
    }
    out.sort_unstable_by_key(|o| (o.receiver_cell, o.sender_cell));
    out
}
