use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;

/// Axis-aligned structured grid of identical box cells.
///
/// Cells are numbered x-fastest: `id = i + nx * (j + ny * k)`. Membership is
/// half-open, lower faces inclusive, so every point of the domain belongs to
/// exactly one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformGrid<T: Real> {
    origin: Vector3<T>,
    spacing: Vector3<T>,
    dims: [usize; 3],
}

impl<T: Real> UniformGrid<T> {
    pub fn new(origin: Vector3<T>, spacing: Vector3<T>, dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(spacing[a] > T::zero()) || !spacing[a].is_finite() {
                return Err(Error::config(format!(
                    "grid spacing along axis {a} must be positive, got {}",
                    spacing[a]
                )));
            }
            if dims[a] == 0 {
                return Err(Error::config(format!("grid dims along axis {a} must be >= 1")));
            }
            if !origin[a].is_finite() {
                return Err(Error::config("grid origin must be finite"));
            }
        }
        let cells = dims[0]
            .checked_mul(dims[1])
            .and_then(|c| c.checked_mul(dims[2]))
            .filter(|&c| c <= u32::MAX as usize)
            .ok_or_else(|| Error::config("grid has too many cells"))?;
        debug_assert!(cells > 0);
        Ok(Self {
            origin,
            spacing,
            dims,
        })
    }

    /// Grid covering the box `[lo, hi]` with `dims` cells.
    pub fn from_bounds(lo: Vector3<T>, hi: Vector3<T>, dims: [usize; 3]) -> Result<Self> {
        let spacing = Vector3::from_fn(|a, _| {
            (hi[a] - lo[a]) / T::from_usize(dims[a].max(1)).unwrap()
        });
        Self::new(lo, spacing, dims)
    }

    pub fn origin(&self) -> Vector3<T> {
        self.origin
    }

    pub fn spacing(&self) -> Vector3<T> {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn cell_volume(&self) -> T {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Area of a cell face normal to `axis`.
    pub fn face_area(&self, axis: usize) -> T {
        let (b, c) = other_axes(axis);
        self.spacing[b] * self.spacing[c]
    }

    pub fn min_spacing(&self) -> T {
        self.spacing[0].min(self.spacing[1]).min(self.spacing[2])
    }

    #[inline]
    pub fn index(&self, ijk: [usize; 3]) -> usize {
        debug_assert!(ijk[0] < self.dims[0] && ijk[1] < self.dims[1] && ijk[2] < self.dims[2]);
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn ijk(&self, id: usize) -> [usize; 3] {
        let i = id % self.dims[0];
        let r = id / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// Coordinate of the `i`-th grid plane along `axis` (`i` may equal `dims[axis]`).
    #[inline]
    pub fn edge(&self, axis: usize, i: usize) -> T {
        self.origin[axis] + T::from_usize(i).unwrap() * self.spacing[axis]
    }

    pub fn lower(&self) -> Vector3<T> {
        self.origin
    }

    pub fn upper(&self) -> Vector3<T> {
        Vector3::from_fn(|a, _| self.edge(a, self.dims[a]))
    }

    pub fn cell_center(&self, id: usize) -> Vector3<T> {
        let ijk = self.ijk(id);
        Vector3::from_fn(|a, _| {
            self.origin[a] + (T::from_usize(ijk[a]).unwrap() + T::half()) * self.spacing[a]
        })
    }

    /// Lower and upper corner of a cell.
    pub fn cell_bounds(&self, id: usize) -> (Vector3<T>, Vector3<T>) {
        let ijk = self.ijk(id);
        (
            Vector3::from_fn(|a, _| self.edge(a, ijk[a])),
            Vector3::from_fn(|a, _| self.edge(a, ijk[a] + 1)),
        )
    }

    /// Cell containing `point` under the lower-inclusive rule, or `None` outside the grid.
    pub fn locate_cell(&self, point: &Vector3<T>) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for (a, slot) in ijk.iter_mut().enumerate() {
            *slot = self.locate_axis(a, point[a])?;
        }
        Some(self.index(ijk))
    }

    /// Same as [`locate_cell`](Self::locate_cell) but returning the (i, j, k) triple.
    pub fn locate_ijk(&self, point: &Vector3<T>) -> Option<[usize; 3]> {
        let mut ijk = [0usize; 3];
        for (a, slot) in ijk.iter_mut().enumerate() {
            *slot = self.locate_axis(a, point[a])?;
        }
        Some(ijk)
    }

    fn locate_axis(&self, axis: usize, x: T) -> Option<usize> {
        if !x.is_finite() {
            return None;
        }
        let n = self.dims[axis];
        if x < self.edge(axis, 0) || x >= self.edge(axis, n) {
            return None;
        }
        let guess = ((x - self.origin[axis]) / self.spacing[axis]).floor();
        let mut i = guess.to_usize().unwrap_or(0).min(n - 1);
        // agree exactly with `edge`, which the overlap code uses
        while i > 0 && x < self.edge(axis, i) {
            i -= 1;
        }
        while i + 1 < n && x >= self.edge(axis, i + 1) {
            i += 1;
        }
        Some(i)
    }

    /// Neighbouring cell id at integer offset `d`, or `None` if it falls outside.
    #[inline]
    pub fn offset(&self, id: usize, d: [i64; 3]) -> Option<usize> {
        let ijk = self.ijk(id);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = ijk[a] as i64 + d[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out))
    }

    /// Converts the grid to another scalar type.
    pub fn cast<U: Real>(&self) -> UniformGrid<U> {
        UniformGrid {
            origin: self.origin.map(|x| U::lit(x.as_f64())),
            spacing: self.spacing.map(|x| U::lit(x.as_f64())),
            dims: self.dims,
        }
    }
}

/// The two axes orthogonal to `axis`, in increasing order.
#[inline]
pub fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}
