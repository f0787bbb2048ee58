//! Cell-to-rank ownership maps.
//!
//! The coarse grid and the DEM decomposition share one map produced by
//! [`colocate_partition`]; the fine grid gets its own map from [`rcb_partition`].

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::UniformGrid;
use crate::real::Real;

/// Owner rank of every cell of a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    dims: [usize; 3],
    owner: Vec<u32>,
    rank_count: usize,
}

impl PartitionMap {
    pub fn from_owners(dims: [usize; 3], owner: Vec<u32>, rank_count: usize) -> Result<Self> {
        if owner.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::config("owner array length does not match grid dims"));
        }
        if rank_count == 0 {
            return Err(Error::config("rank count must be at least 1"));
        }
        if let Some(&bad) = owner.iter().find(|&&r| r as usize >= rank_count) {
            return Err(Error::config(format!("owner {bad} out of range for {rank_count} ranks")));
        }
        Ok(Self {
            dims,
            owner,
            rank_count,
        })
    }

    /// Everything on rank 0.
    pub fn single(dims: [usize; 3]) -> Self {
        Self {
            dims,
            owner: vec![0; dims[0] * dims[1] * dims[2]],
            rank_count: 1,
        }
    }

    #[inline]
    pub fn owner(&self, cell: usize) -> usize {
        self.owner[cell] as usize
    }

    pub fn owners(&self) -> &[u32] {
        &self.owner
    }

    pub fn rank_count(&self) -> usize {
        self.rank_count
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_count(&self) -> usize {
        self.owner.len()
    }

    pub fn matches<T: Real>(&self, grid: &UniformGrid<T>) -> bool {
        self.dims == grid.dims()
    }

    /// Cells owned by `rank`, ascending.
    pub fn cells_of(&self, rank: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&c| self.owner(c) == rank).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.rank_count];
        for &r in &self.owner {
            n[r as usize] += 1;
        }
        n
    }

    /// Same partition with rank `r` renamed to `rank_count - 1 - r`.
    pub fn reversed(&self) -> Self {
        let p = self.rank_count as u32;
        Self {
            dims: self.dims,
            owner: self.owner.iter().map(|&r| p - 1 - r).collect(),
            rank_count: self.rank_count,
        }
    }

    /// Axis-aligned bounding box of a rank's cells in index space, `[lo, hi)`.
    pub fn index_box(&self, rank: usize) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for c in 0..self.owner.len() {
            if self.owner(c) != rank {
                continue;
            }
            any = true;
            let ijk = ijk_of(self.dims, c);
            for a in 0..3 {
                lo[a] = lo[a].min(ijk[a]);
                hi[a] = hi[a].max(ijk[a] + 1);
            }
        }
        any.then_some((lo, hi))
    }
}

fn ijk_of(dims: [usize; 3], id: usize) -> [usize; 3] {
    [id % dims[0], (id / dims[0]) % dims[1], id / (dims[0] * dims[1])]
}

/// Non-negative work estimate per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadWeights {
    per_cell: Vec<f64>,
}

impl LoadWeights {
    pub fn new(per_cell: Vec<f64>) -> Result<Self> {
        if let Some(w) = per_cell.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("load weight {w} is not a finite non-negative number")));
        }
        if !per_cell.iter().any(|&w| w > 0.0) {
            return Err(Error::config("load weights are all zero"));
        }
        Ok(Self { per_cell })
    }

    pub fn uniform(cells: usize) -> Self {
        Self {
            per_cell: vec![1.0; cells],
        }
    }

    /// Number of points falling in each cell; points outside the grid are ignored.
    pub fn histogram<T: Real>(grid: &UniformGrid<T>, points: impl IntoIterator<Item = Vector3<T>>) -> Result<Self> {
        let mut w = vec![0.0; grid.cell_count()];
        for p in points {
            if let Some(c) = grid.locate_cell(&p) {
                w[c] += 1.0;
            }
        }
        Self::new(w)
    }

    pub fn values(&self) -> &[f64] {
        &self.per_cell
    }

    pub fn total(&self) -> f64 {
        self.per_cell.iter().sum()
    }

    pub fn max_cell(&self) -> f64 {
        self.per_cell.iter().copied().fold(0.0, f64::max)
    }

    pub fn len(&self) -> usize {
        self.per_cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_cell.is_empty()
    }
}

/// Block sizes of `n` cells split into `p` nearly equal contiguous ranges.
fn block_starts(n: usize, p: usize) -> Vec<usize> {
    (0..=p).map(|b| b * n / p).collect()
}

/// Box decomposition of the coarse grid, shared by the DEM domain.
///
/// Among all `px·py·pz = P` factorisations that fit the grid, picks the one with
/// the smallest largest box, then the smallest total cut area, then the
/// lexicographically smallest `(px, py, pz)`. Ranks are numbered x-fastest over
/// the blocks.
pub fn colocate_partition<T: Real>(grid: &UniformGrid<T>, rank_count: usize) -> Result<PartitionMap> {
    let dims = grid.dims();
    let cells = grid.cell_count();
    if rank_count == 0 {
        return Err(Error::config("rank count must be at least 1"));
    }
    if rank_count > cells {
        return Err(Error::config(format!(
            "rank count {rank_count} exceeds the {cells} coarse cells"
        )));
    }
    let h = grid.spacing();
    let mut best: Option<((usize, f64, [usize; 3]), [usize; 3])> = None;
    for px in 1..=rank_count {
        if rank_count % px != 0 || px > dims[0] {
            continue;
        }
        for py in 1..=rank_count / px {
            if (rank_count / px) % py != 0 || py > dims[1] {
                continue;
            }
            let pz = rank_count / px / py;
            if pz > dims[2] {
                continue;
            }
            let p = [px, py, pz];
            let largest: usize = (0..3).map(|a| dims[a].div_ceil(p[a])).product();
            let area: f64 = (0..3)
                .map(|a| {
                    let (b, c) = crate::mesh::other_axes(a);
                    (p[a] - 1) as f64
                        * (dims[b] as f64 * h[b].as_f64())
                        * (dims[c] as f64 * h[c].as_f64())
                })
                .sum();
            let key = (largest, area, p);
            let better = match &best {
                None => true,
                Some((k, _)) => {
                    key.0 < k.0 || (key.0 == k.0 && (key.1 < k.1 || (key.1 == k.1 && key.2 < k.2)))
                }
            };
            if better {
                best = Some((key, p));
            }
        }
    }
    let owner = match best {
        Some((_, p)) => {
            let starts: Vec<Vec<usize>> = (0..3).map(|a| block_starts(dims[a], p[a])).collect();
            let block_of = |a: usize, i: usize| starts[a].partition_point(|&s| s <= i) - 1;
            (0..cells)
                .map(|c| {
                    let ijk = grid.ijk(c);
                    let b = [block_of(0, ijk[0]), block_of(1, ijk[1]), block_of(2, ijk[2])];
                    (b[0] + p[0] * (b[1] + p[1] * b[2])) as u32
                })
                .collect()
        }
        // no box factorisation fits: contiguous slabs of the x-fastest numbering
        None => (0..cells).map(|c| (c * rank_count / cells) as u32).collect(),
    };
    PartitionMap::from_owners(dims, owner, rank_count)
}

/// Recursive coordinate bisection of a grid into `rank_count` (a power of two) boxes.
///
/// Each level cuts the current box with a grid plane normal to its longest
/// physical axis (ties go to the lower axis index), at the plane whose weight
/// prefix is closest to half the box weight; ties go to the lower plane. A box
/// carrying no weight is split by cell count instead.
pub fn rcb_partition<T: Real>(
    grid: &UniformGrid<T>,
    weights: &LoadWeights,
    rank_count: usize,
) -> Result<PartitionMap> {
    if rank_count == 0 || !rank_count.is_power_of_two() {
        return Err(Error::config(format!(
            "RCB needs a power-of-two rank count, got {rank_count}"
        )));
    }
    if weights.len() != grid.cell_count() {
        return Err(Error::config("load weights do not match the grid"));
    }
    if rank_count > grid.cell_count() {
        return Err(Error::config(format!(
            "rank count {rank_count} exceeds the {} grid cells",
            grid.cell_count()
        )));
    }
    let dims = grid.dims();
    let mut owner = vec![0u32; grid.cell_count()];
    let ctx = Rcb {
        grid,
        w: weights.values(),
    };
    ctx.split([0, 0, 0], dims, 0, rank_count, &mut owner)?;
    PartitionMap::from_owners(dims, owner, rank_count)
}

struct Rcb<'a, T: Real> {
    grid: &'a UniformGrid<T>,
    w: &'a [f64],
}

impl<T: Real> Rcb<'_, T> {
    fn split(&self, lo: [usize; 3], hi: [usize; 3], first_rank: usize, ranks: usize, owner: &mut [u32]) -> Result<()> {
        if ranks == 1 {
            for k in lo[2]..hi[2] {
                for j in lo[1]..hi[1] {
                    for i in lo[0]..hi[0] {
                        owner[self.grid.index([i, j, k])] = first_rank as u32;
                    }
                }
            }
            return Ok(());
        }
        let h = self.grid.spacing();
        let mut axis = None;
        let mut longest = T::zero();
        for a in 0..3 {
            let n = hi[a] - lo[a];
            if n < 2 {
                continue;
            }
            let len = T::from_usize(n).unwrap() * h[a];
            if axis.is_none() || len > longest {
                axis = Some(a);
                longest = len;
            }
        }
        let axis = axis.ok_or_else(|| Error::config("RCB ran out of cells to split"))?;
        let (b, c) = crate::mesh::other_axes(axis);
        let section = (hi[b] - lo[b]) * (hi[c] - lo[c]);
        let half_ranks = ranks / 2;

        // weight of each slab normal to `axis`
        let slabs: Vec<f64> = (lo[axis]..hi[axis])
            .map(|s| {
                let mut sum = 0.0;
                let mut ijk = [0; 3];
                ijk[axis] = s;
                for y in lo[c]..hi[c] {
                    ijk[c] = y;
                    for x in lo[b]..hi[b] {
                        ijk[b] = x;
                        sum += self.w[self.grid.index(ijk)];
                    }
                }
                sum
            })
            .collect();
        let total: f64 = slabs.iter().sum();
        let n = slabs.len();
        let mut best = None;
        let mut best_err = f64::INFINITY;
        let mut prefix = 0.0;
        for cut in 1..n {
            prefix += slabs[cut - 1];
            // each half needs at least one cell per rank
            if cut * section < half_ranks || (n - cut) * section < half_ranks {
                continue;
            }
            let err = if total > 0.0 {
                (prefix - 0.5 * total).abs()
            } else {
                (cut as f64 - 0.5 * n as f64).abs()
            };
            if err < best_err {
                best_err = err;
                best = Some(cut);
            }
        }
        let cut = best.ok_or_else(|| Error::config("RCB could not place a cut with enough cells per side"))?;
        let mut mid_hi = hi;
        mid_hi[axis] = lo[axis] + cut;
        let mut mid_lo = lo;
        mid_lo[axis] = lo[axis] + cut;
        self.split(lo, mid_hi, first_rank, half_ranks, owner)?;
        self.split(mid_lo, hi, first_rank + half_ranks, half_ranks, owner)
    }
}

/// Largest per-rank weight over the mean per-rank weight; 1 is perfect balance.
pub fn imbalance_factor(map: &PartitionMap, weights: &LoadWeights) -> Result<f64> {
    if weights.len() != map.cell_count() {
        return Err(Error::config("load weights do not match the partition"));
    }
    let mut per_rank = vec![0.0; map.rank_count()];
    for (c, &w) in weights.values().iter().enumerate() {
        per_rank[map.owner(c)] += w;
    }
    let total: f64 = per_rank.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("imbalance of a zero total weight is undefined"));
    }
    let max = per_rank.iter().copied().fold(0.0, f64::max);
    Ok(max * map.rank_count() as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn grid(d: [usize; 3]) -> UniformGrid<f64> {
        UniformGrid::new(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), d).unwrap()
    }

    fn connected(map: &PartitionMap, rank: usize) -> bool {
        let g = grid(map.dims());
        let cells = map.cells_of(rank);
        let Some(&start) = cells.first() else { return false };
        let mut seen = vec![false; g.cell_count()];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        let mut reached = 1;
        while let Some(c) = q.pop_front() {
            for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                if let Some(n) = g.offset(c, d) {
                    if !seen[n] && map.owner(n) == rank {
                        seen[n] = true;
                        reached += 1;
                        q.push_back(n);
                    }
                }
            }
        }
        reached == cells.len()
    }

    #[test]
    fn colocate_even_slabs() {
        let m = colocate_partition(&grid([4, 1, 1]), 2).unwrap();
        assert_eq!(m.owners(), &[0, 0, 1, 1]);
        let m = colocate_partition(&grid([3, 2, 5]), 1).unwrap();
        assert!(m.owners().iter().all(|&r| r == 0));
    }

    #[test]
    fn colocate_cube_into_four() {
        let m = colocate_partition(&grid([6, 6, 6]), 4).unwrap();
        assert_eq!(m.counts(), vec![54; 4]);
        for r in 0..4 {
            assert!(connected(&m, r));
        }
    }

    #[test]
    fn colocate_rejects_too_many_ranks() {
        assert!(colocate_partition(&grid([2, 1, 1]), 3).is_err());
    }

    #[test]
    fn rcb_uniform_cube_eighths() {
        let g = grid([8, 8, 8]);
        let m = rcb_partition(&g, &LoadWeights::uniform(512), 8).unwrap();
        assert_eq!(m.counts(), vec![64; 8]);
        let m1 = rcb_partition(&g, &LoadWeights::uniform(512), 1).unwrap();
        assert!(m1.owners().iter().all(|&r| r == 0));
    }

    #[test]
    fn rcb_rejects_non_power_of_two() {
        assert!(rcb_partition(&grid([4, 4, 4]), &LoadWeights::uniform(64), 3).is_err());
    }

    #[test]
    fn rcb_split_follows_weighted_median() {
        // all weight in the low octant of an 8^3 grid, random positive values there
        let g = grid([8, 8, 8]);
        let mut w = vec![0.0; 512];
        for c in 0..512 {
            let [i, j, k] = g.ijk(c);
            if i < 4 && j < 4 && k < 4 {
                w[c] = 1.0 + ((c * 7919) % 13) as f64;
            }
        }
        let weights = LoadWeights::new(w.clone()).unwrap();
        let m = rcb_partition(&g, &weights, 2).unwrap();
        // oracle: x-slab prefix sums, cut at the slab boundary nearest half
        let total: f64 = w.iter().sum();
        let slab: Vec<f64> = (0..8)
            .map(|i| (0..512).filter(|&c| g.ijk(c)[0] == i).map(|c| w[c]).sum())
            .collect();
        let mut best = (f64::INFINITY, 0);
        let mut acc = 0.0;
        for cut in 1..8 {
            acc += slab[cut - 1];
            let e = (acc - total / 2.0).abs();
            if e < best.0 {
                best = (e, cut);
            }
        }
        assert!(best.1 < 4, "cut should fall inside the loaded octant");
        for c in 0..512 {
            let expect = if g.ijk(c)[0] < best.1 { 0 } else { 1 };
            assert_eq!(m.owner(c), expect);
        }
        let left: f64 = (0..512).filter(|&c| m.owner(c) == 0).map(|c| w[c]).sum();
        let widest = slab.iter().copied().fold(0.0, f64::max);
        assert!((left - total / 2.0).abs() <= widest);
    }

    #[test]
    fn imbalance_extremes() {
        let m = colocate_partition(&grid([4, 1, 1]), 2).unwrap();
        assert_eq!(imbalance_factor(&m, &LoadWeights::uniform(4)).unwrap(), 1.0);
        let m4 = colocate_partition(&grid([4, 1, 1]), 4).unwrap();
        let w = LoadWeights::new(vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(imbalance_factor(&m4, &w).unwrap(), 4.0);
        assert!(LoadWeights::new(vec![0.0; 4]).is_err());
        assert!(LoadWeights::new(vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn reversed_relabels() {
        let m = colocate_partition(&grid([4, 1, 1]), 2).unwrap().reversed();
        assert_eq!(m.owners(), &[1, 1, 0, 0]);
    }

    proptest! {
        #[test]
        fn rcb_is_complete_connected_and_balanced(
            d in prop::array::uniform3(1usize..9),
            log_p in 0u32..4,
            seed in any::<u64>(),
        ) {
            let g = grid(d);
            let p = 1usize << log_p;
            prop_assume!(p <= g.cell_count());
            let w: Vec<f64> = (0..g.cell_count())
                .map(|c| ((c as u64).wrapping_mul(seed | 1).rotate_left(17) % 5) as f64)
                .collect();
            prop_assume!(w.iter().any(|&x| x > 0.0));
            let weights = LoadWeights::new(w.clone()).unwrap();
            let m = match rcb_partition(&g, &weights, p) {
                Ok(m) => m,
                // thin grids can run out of splittable axes
                Err(_) => return Ok(()),
            };
            prop_assert_eq!(m.counts().iter().sum::<usize>(), g.cell_count());
            for r in 0..p {
                prop_assert!(connected(&m, r), "rank {} not connected", r);
            }
            let uniform = rcb_partition(&g, &LoadWeights::uniform(g.cell_count()), p).unwrap();
            let counts = uniform.counts();
            prop_assert!(counts.iter().all(|&c| c > 0));
        }

        #[test]
        fn colocate_boxes_are_connected(d in prop::array::uniform3(1usize..7), p in 1usize..9) {
            let g = grid(d);
            prop_assume!(p <= g.cell_count());
            let m = colocate_partition(&g, p).unwrap();
            prop_assert_eq!(m.counts().iter().sum::<usize>(), g.cell_count());
            for r in 0..p {
                prop_assert!(m.counts()[r] > 0);
            }
        }
    }
}
