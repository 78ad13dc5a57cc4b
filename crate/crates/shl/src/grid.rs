use crate::error::{Result, ShlError};
use serde::{Deserialize, Serialize};

/// Periodic d-dimensional lattice with `n` points per side and spacing `h`.
///
/// All index arithmetic wraps modulo `n` per axis. Sites are stored row-major
/// with axis 0 fastest, so the flat index of `(x_0, .., x_{d-1})` is
/// `x_0 + n x_1 + n^2 x_2`. Lengths are measured in units of the correlation
/// length, i.e. the micro scale is 1 and the side length is `L = n h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    d: usize,
    n: usize,
    h: f64,
}

impl PeriodicGrid {
    pub fn new(d: usize, n: usize, h: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(ShlError::InvalidGrid(format!("d must be 1, 2 or 3, got {d}")));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(ShlError::InvalidGrid(format!(
                "n must be a power of two >= 4, got {n}"
            )));
        }
        if !(h > 0.0) {
            return Err(ShlError::InvalidGrid(format!("h must be positive, got {h}")));
        }
        Ok(Self { d, n, h })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn points_per_side(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Side length `L = n h`.
    pub fn side_length(&self) -> f64 {
        self.n as f64 * self.h
    }

    /// Number of lattice sites `n^d`.
    pub fn vol(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    /// Stride of `axis` in the flat row-major layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    /// Number of ordered plaquette pairs `j < k`.
    pub fn pair_count(&self) -> usize {
        self.d * (self.d - 1) / 2
    }

    /// Component slot of the plaquette pair `(j, k)` with `j < k`.
    pub fn pair_index(&self, j: usize, k: usize) -> usize {
        debug_assert!(j < k && k < self.d);
        match (j, k) {
            (0, 1) => 0,
            (0, 2) => 1,
            (1, 2) => 2,
            _ => unreachable!(),
        }
    }

    /// All plaquette pairs `(j, k)`, `j < k`, in component order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.pair_count());
        for j in 0..self.d {
            for k in (j + 1)..self.d {
                out.push((j, k));
            }
        }
        out
    }

    /// Coordinates of a flat index.
    pub fn coords(&self, mut idx: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for item in c.iter_mut().take(self.d) {
            *item = idx % self.n;
            idx /= self.n;
        }
        c
    }

    /// Flat index of (wrapped) coordinates.
    pub fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for axis in (0..self.d).rev() {
            idx = idx * self.n + (coords[axis] % self.n);
        }
        idx
    }

    /// Flat index shifted by `steps` lattice cells along `axis` (wrapping).
    pub fn shift(&self, idx: usize, axis: usize, steps: isize) -> usize {
        let n = self.n as isize;
        let s = self.stride(axis) as isize;
        let c = ((idx as isize / s) % n) as isize;
        let c2 = (c + steps).rem_euclid(n);
        (idx as isize + (c2 - c) * s) as usize
    }

    /// Visits every line along `axis`: calls `f(base)` where the line's sites
    /// are `base + t * stride(axis)` for `t in 0..n`.
    pub fn for_each_line<F: FnMut(usize)>(&self, axis: usize, mut f: F) {
        let s = self.stride(axis);
        let outer = self.vol() / (self.n * s);
        for o in 0..outer {
            let block = o * self.n * s;
            for inner in 0..s {
                f(block + inner);
            }
        }
    }

    /// Minimum-image distance (Euclidean, in length units) between two sites.
    pub fn torus_distance(&self, a: usize, b: usize) -> f64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        let mut sum = 0.0;
        for axis in 0..self.d {
            let raw = (ca[axis] as isize - cb[axis] as isize).unsigned_abs() % self.n;
            let w = raw.min(self.n - raw) as f64 * self.h;
            sum += w * w;
        }
        sum.sqrt()
    }

    /// Minimum-image distance of a site from the origin.
    pub fn distance_to_origin(&self, idx: usize) -> f64 {
        self.torus_distance(idx, 0)
    }
}

/// Axis-aligned sub-box on the torus: `lo[axis] .. lo[axis] + size[axis]`
/// lattice cells per axis (wrapping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBox {
    pub lo: [usize; 3],
    pub size: [usize; 3],
}

impl GridBox {
    /// ℓ∞ "ball" of radius `r` (in length units) centered at site `center`:
    /// all sites within max-norm distance `r`.
    pub fn linf_ball(grid: &PeriodicGrid, center: usize, r: f64) -> Result<Self> {
        let steps = (r / grid.spacing()).floor() as usize;
        let width = (2 * steps + 1).min(grid.points_per_side());
        let c = grid.coords(center);
        let mut lo = [0usize; 3];
        let mut size = [1usize; 3];
        for axis in 0..grid.dim() {
            let n = grid.points_per_side();
            lo[axis] = (c[axis] + n - steps.min(n - 1)) % n;
            size[axis] = width;
        }
        let b = Self { lo, size };
        if b.vol(grid) == 0 {
            return Err(ShlError::EmptyBox);
        }
        Ok(b)
    }

    pub fn vol(&self, grid: &PeriodicGrid) -> usize {
        let mut v = 1;
        for axis in 0..grid.dim() {
            v *= self.size[axis];
        }
        v
    }

    /// Visits every site of the box (wrapped flat indices).
    pub fn for_each_site<F: FnMut(usize)>(&self, grid: &PeriodicGrid, mut f: F) {
        let d = grid.dim();
        let n = grid.points_per_side();
        let mut c = [0usize; 3];
        let total = self.vol(grid);
        let mut coords = [0usize; 3];
        for _ in 0..total {
            for axis in 0..d {
                coords[axis] = (self.lo[axis] + c[axis]) % n;
            }
            f(grid.index(&coords[..d]));
            // odometer increment
            for axis in 0..d {
                c[axis] += 1;
                if c[axis] < self.size[axis] {
                    break;
                }
                c[axis] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(PeriodicGrid::new(0, 8, 1.0).is_err());
        assert!(PeriodicGrid::new(4, 8, 1.0).is_err());
        assert!(PeriodicGrid::new(2, 6, 1.0).is_err());
        assert!(PeriodicGrid::new(2, 2, 1.0).is_err());
        assert!(PeriodicGrid::new(2, 8, 0.0).is_err());
        assert!(PeriodicGrid::new(3, 8, 0.25).is_ok());
    }

    #[test]
    fn index_round_trip_and_shift() {
        let g = PeriodicGrid::new(3, 4, 1.0).unwrap();
        for idx in 0..g.vol() {
            let c = g.coords(idx);
            assert_eq!(g.index(&c[..3]), idx);
        }
        let idx = g.index(&[3, 0, 2]);
        assert_eq!(g.coords(g.shift(idx, 0, 1))[0], 0);
        assert_eq!(g.coords(g.shift(idx, 1, -1))[1], 3);
        assert_eq!(g.shift(g.shift(idx, 2, 5), 2, -5), idx);
    }

    #[test]
    fn lines_cover_grid() {
        let g = PeriodicGrid::new(2, 8, 0.5).unwrap();
        for axis in 0..2 {
            let mut seen = vec![false; g.vol()];
            g.for_each_line(axis, |base| {
                let s = g.stride(axis);
                for t in 0..g.points_per_side() {
                    let idx = base + t * s;
                    assert!(!seen[idx]);
                    seen[idx] = true;
                }
            });
            assert!(seen.iter().all(|&x| x));
        }
    }

    #[test]
    fn linf_ball_sizes() {
        let g = PeriodicGrid::new(2, 16, 1.0).unwrap();
        let b = GridBox::linf_ball(&g, 0, 2.0).unwrap();
        assert_eq!(b.vol(&g), 25);
        let mut count = 0;
        b.for_each_site(&g, |_| count += 1);
        assert_eq!(count, 25);
    }

    #[test]
    fn torus_distance_wraps() {
        let g = PeriodicGrid::new(1, 8, 0.5).unwrap();
        assert!((g.torus_distance(0, 7) - 0.5).abs() < 1e-15);
        assert!((g.torus_distance(1, 5) - 2.0).abs() < 1e-15);
    }
}
