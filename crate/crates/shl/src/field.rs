use crate::error::{Result, ShlError};
use crate::grid::{GridBox, PeriodicGrid};

/// One real value per lattice site.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

/// One real value per site per direction, located at the edge midpoints
/// `x + (h/2) e_j`. Storage is direction-major: component `j` occupies
/// `values[j*vol .. (j+1)*vol]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

/// One real value per site per ordered pair `j < k`, located at plaquette
/// centers. Only the upper triangle is stored; `sigma_{kj} = -sigma_{jk}` is
/// implied. Storage is pair-major in the order given by `PeriodicGrid::pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaquetteField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self { grid, values: vec![0.0; grid.vol()] }
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.vol()] }
    }

    pub fn from_values(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.vol() {
            return Err(ShlError::GridMismatch(format!(
                "scalar field needs {} values, got {}",
                grid.vol(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: PeriodicGrid, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let d = grid.dim();
        let values = (0..grid.vol()).map(|i| f(&grid.coords(i)[..d])).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Subtracts the mean in place; used to anchor correctors.
    pub fn remove_mean(&mut self) {
        let m = self.mean();
        for v in &mut self.values {
            *v -= m;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl EdgeField {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self { grid, values: vec![0.0; grid.dim() * grid.vol()] }
    }

    pub fn from_values(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.dim() * grid.vol() {
            return Err(ShlError::GridMismatch(format!(
                "edge field needs {} values, got {}",
                grid.dim() * grid.vol(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Builds from per-direction site slices.
    pub fn from_components(grid: PeriodicGrid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() || comps.iter().any(|c| c.len() != grid.vol()) {
            return Err(ShlError::GridMismatch("bad edge components".into()));
        }
        Ok(Self { grid, values: comps.concat() })
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let v = self.grid.vol();
        &self.values[j * v..(j + 1) * v]
    }

    pub fn component_mut(&mut self, j: usize) -> &mut [f64] {
        let v = self.grid.vol();
        &mut self.values[j * v..(j + 1) * v]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Per-direction spatial means.
    pub fn component_means(&self) -> Vec<f64> {
        (0..self.grid.dim())
            .map(|j| self.component(j).iter().sum::<f64>() / self.grid.vol() as f64)
            .collect()
    }

    /// Pointwise Euclidean magnitude `|F|(x)` as a site field.
    pub fn magnitude(&self) -> ScalarField {
        let vol = self.grid.vol();
        let mut out = vec![0.0; vol];
        for j in 0..self.grid.dim() {
            let c = self.component(j);
            for (o, v) in out.iter_mut().zip(c) {
                *o += v * v;
            }
        }
        for o in &mut out {
            *o = o.sqrt();
        }
        ScalarField { grid: self.grid, values: out }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl PlaquetteField {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self { grid, values: vec![0.0; grid.pair_count() * grid.vol()] }
    }

    pub fn from_values(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.pair_count() * grid.vol() {
            return Err(ShlError::GridMismatch(format!(
                "plaquette field needs {} values, got {}",
                grid.pair_count() * grid.vol(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    /// Stored component of pair slot `p` (pairs in `PeriodicGrid::pairs` order).
    pub fn pair(&self, p: usize) -> &[f64] {
        let v = self.grid.vol();
        &self.values[p * v..(p + 1) * v]
    }

    pub fn pair_mut(&mut self, p: usize) -> &mut [f64] {
        let v = self.grid.vol();
        &mut self.values[p * v..(p + 1) * v]
    }

    /// Signed entry `sigma_{jk}` at `idx` for any `j != k`, using the implied
    /// skew symmetry for `j > k`.
    pub fn entry(&self, j: usize, k: usize, idx: usize) -> f64 {
        if j < k {
            self.pair(self.grid.pair_index(j, k))[idx]
        } else {
            -self.pair(self.grid.pair_index(k, j))[idx]
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `L^p` norms and box averages shared by all field kinds.
///
/// The flat value slice is treated as a collection of site samples weighted
/// by the cell volume `h^d`; for staggered kinds every component contributes.
pub trait FieldNorms {
    fn norm_grid(&self) -> PeriodicGrid;
    fn norm_values(&self) -> &[f64];
    /// Values per site (1 for scalars, d for edges, d(d-1)/2 for plaquettes).
    fn per_site(&self) -> usize;

    /// `(h^d sum |.|^p)^{1/p}` over the whole grid, or the max for `p = inf`.
    fn lp_norm(&self, p: f64) -> Result<f64> {
        lp_of(self.norm_values(), p, self.norm_grid().cell_volume())
    }

    /// Same over a sub-box (all per-site components included).
    fn lp_norm_box(&self, p: f64, b: &GridBox) -> Result<f64> {
        let grid = self.norm_grid();
        if b.vol(&grid) == 0 {
            return Err(ShlError::EmptyBox);
        }
        let vals = self.norm_values();
        let vol = grid.vol();
        let mut acc: Vec<f64> = Vec::with_capacity(b.vol(&grid) * self.per_site());
        b.for_each_site(&grid, |idx| {
            for c in 0..self.per_site() {
                acc.push(vals[c * vol + idx]);
            }
        });
        lp_of(&acc, p, grid.cell_volume())
    }

    /// Box average (sum over box sites and components divided by site count).
    fn box_average(&self, b: &GridBox) -> Result<f64> {
        let grid = self.norm_grid();
        let count = b.vol(&grid) * self.per_site();
        if count == 0 {
            return Err(ShlError::EmptyBox);
        }
        let vals = self.norm_values();
        let vol = grid.vol();
        let mut sum = 0.0;
        b.for_each_site(&grid, |idx| {
            for c in 0..self.per_site() {
                sum += vals[c * vol + idx];
            }
        });
        Ok(sum / count as f64)
    }
}

fn lp_of(vals: &[f64], p: f64, cell: f64) -> Result<f64> {
    if vals.is_empty() {
        return Err(ShlError::EmptyBox);
    }
    if p.is_infinite() {
        return Ok(vals.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    if p < 1.0 {
        return Err(ShlError::InvalidArgument(format!("p must be in [1, inf], got {p}")));
    }
    let s: f64 = vals.iter().map(|v| v.abs().powf(p)).sum();
    Ok((cell * s).powf(1.0 / p))
}

impl FieldNorms for ScalarField {
    fn norm_grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn norm_values(&self) -> &[f64] {
        &self.values
    }
    fn per_site(&self) -> usize {
        1
    }
}

impl FieldNorms for EdgeField {
    fn norm_grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn norm_values(&self) -> &[f64] {
        &self.values
    }
    fn per_site(&self) -> usize {
        self.grid.dim()
    }
}

impl FieldNorms for PlaquetteField {
    fn norm_grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn norm_values(&self) -> &[f64] {
        &self.values
    }
    fn per_site(&self) -> usize {
        self.grid.pair_count()
    }
}

/// Euclidean dot product of flat value vectors weighted by `h^d`
/// (the lattice `L^2` inner product).
pub fn inner(a: &[f64], b: &[f64], cell: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    cell * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2() -> PeriodicGrid {
        PeriodicGrid::new(2, 4, 0.5).unwrap()
    }

    #[test]
    fn constant_field_norms() {
        let g = grid2();
        let f = ScalarField::constant(g, -3.0);
        // |c| * volume^{1/p}
        let volume = g.side_length().powi(2);
        for p in [1.0, 2.0, 3.5] {
            let want = 3.0 * volume.powf(1.0 / p);
            assert!((f.lp_norm(p).unwrap() - want).abs() < 1e-12);
        }
        assert_eq!(f.lp_norm(f64::INFINITY).unwrap(), 3.0);
    }

    #[test]
    fn linf_picks_max() {
        let g = PeriodicGrid::new(1, 4, 1.0).unwrap();
        let f = ScalarField::from_values(g, vec![1.0, -3.0, 2.0, 0.0]).unwrap();
        assert_eq!(f.lp_norm(f64::INFINITY).unwrap(), 3.0);
    }

    #[test]
    fn box_average_of_indicator() {
        let g = grid2();
        let mut f = ScalarField::zeros(g);
        f.values_mut()[0] = 8.0;
        let b = GridBox { lo: [3, 3, 0], size: [2, 2, 1] };
        // box wraps and contains site 0 once
        assert!((f.box_average(&b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn plaquette_skew_entry() {
        let g = PeriodicGrid::new(3, 4, 1.0).unwrap();
        let mut s = PlaquetteField::zeros(g);
        s.pair_mut(g.pair_index(0, 2))[5] = 7.0;
        assert_eq!(s.entry(0, 2, 5), 7.0);
        assert_eq!(s.entry(2, 0, 5), -7.0);
    }

    #[test]
    fn rejects_bad_lengths() {
        let g = grid2();
        assert!(ScalarField::from_values(g, vec![0.0; 3]).is_err());
        assert!(EdgeField::from_values(g, vec![0.0; 16]).is_err());
        assert!(PlaquetteField::from_values(g, vec![0.0; 15]).is_err());
    }
}
