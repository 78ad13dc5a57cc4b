//! Discrete exterior calculus on the periodic lattice.
//!
//! Scalars live at sites, edge fields at forward edge midpoints, plaquette
//! fields at plaquette centers. The forward difference `D+` and backward
//! difference `D-` are exact negative adjoints under the lattice inner
//! product, all shift operators commute, and the two-point edge averages
//! below satisfy the exact product rules
//!
//! `D+_j(fg) = avg_j(f) D+_j(g) + avg_j(g) D+_j(f)`
//! `D-_j(FG) = bavg_j(F) D-_j(G) + bavg_j(G) D-_j(F)`
//!
//! which is what makes the continuum corrector identities hold on the
//! lattice to solver tolerance instead of discretization error.

use crate::field::{EdgeField, PlaquetteField, ScalarField};
use crate::grid::PeriodicGrid;

/// Raw forward difference `(v(x + h e_j) - v(x)) / h` on a flat slice.
pub(crate) fn diff_fwd(grid: &PeriodicGrid, axis: usize, src: &[f64]) -> Vec<f64> {
    let n = grid.points_per_side();
    let s = grid.stride(axis);
    let inv_h = 1.0 / grid.spacing();
    let mut out = vec![0.0; src.len()];
    grid.for_each_line(axis, |base| {
        let mut idx = base;
        for _ in 0..n - 1 {
            out[idx] = (src[idx + s] - src[idx]) * inv_h;
            idx += s;
        }
        out[idx] = (src[base] - src[idx]) * inv_h;
    });
    out
}

/// Raw backward difference `(v(x) - v(x - h e_j)) / h`.
pub(crate) fn diff_bwd(grid: &PeriodicGrid, axis: usize, src: &[f64]) -> Vec<f64> {
    let n = grid.points_per_side();
    let s = grid.stride(axis);
    let inv_h = 1.0 / grid.spacing();
    let mut out = vec![0.0; src.len()];
    grid.for_each_line(axis, |base| {
        let last = base + (n - 1) * s;
        out[base] = (src[base] - src[last]) * inv_h;
        let mut idx = base + s;
        for _ in 1..n {
            out[idx] = (src[idx] - src[idx - s]) * inv_h;
            idx += s;
        }
    });
    out
}

/// Centered difference `(v(x + h e_j) - v(x - h e_j)) / 2h` at sites.
pub(crate) fn diff_ctr(grid: &PeriodicGrid, axis: usize, src: &[f64]) -> Vec<f64> {
    let n = grid.points_per_side();
    let s = grid.stride(axis);
    let c = 0.5 / grid.spacing();
    let mut out = vec![0.0; src.len()];
    grid.for_each_line(axis, |base| {
        let last = base + (n - 1) * s;
        out[base] = (src[base + s] - src[last]) * c;
        let mut idx = base + s;
        for _ in 1..n - 1 {
            out[idx] = (src[idx + s] - src[idx - s]) * c;
            idx += s;
        }
        out[last] = (src[base] - src[last - s]) * c;
    });
    out
}

/// Forward two-point average `(v(x) + v(x + h e_j)) / 2`: site values moved to
/// the midpoint of the forward edge in direction `j` (and, applied to edge
/// values of direction `j`, back to sites shifted by half a cell).
pub(crate) fn avg_fwd(grid: &PeriodicGrid, axis: usize, src: &[f64]) -> Vec<f64> {
    let n = grid.points_per_side();
    let s = grid.stride(axis);
    let mut out = vec![0.0; src.len()];
    grid.for_each_line(axis, |base| {
        let mut idx = base;
        for _ in 0..n - 1 {
            out[idx] = 0.5 * (src[idx] + src[idx + s]);
            idx += s;
        }
        out[idx] = 0.5 * (src[idx] + src[base]);
    });
    out
}

/// Backward two-point average `(v(x) + v(x - h e_j)) / 2`.
pub(crate) fn avg_bwd(grid: &PeriodicGrid, axis: usize, src: &[f64]) -> Vec<f64> {
    let n = grid.points_per_side();
    let s = grid.stride(axis);
    let mut out = vec![0.0; src.len()];
    grid.for_each_line(axis, |base| {
        let last = base + (n - 1) * s;
        out[base] = 0.5 * (src[base] + src[last]);
        let mut idx = base + s;
        for _ in 1..n {
            out[idx] = 0.5 * (src[idx] + src[idx - s]);
            idx += s;
        }
    });
    out
}

/// Forward-difference gradient `(D+_j u)(x) = (u(x + h e_j) - u(x)) / h`.
pub fn gradient_fwd(u: &ScalarField) -> EdgeField {
    let grid = u.grid();
    let comps = (0..grid.dim()).map(|j| diff_fwd(&grid, j, u.values())).collect();
    EdgeField::from_components(grid, comps).expect("component shapes are consistent")
}

/// Backward-difference divergence, the exact negative adjoint of
/// [`gradient_fwd`]: `(div F)(x) = sum_j (F_j(x) - F_j(x - h e_j)) / h`.
pub fn divergence_bwd(f: &EdgeField) -> ScalarField {
    let grid = f.grid();
    let mut out = vec![0.0; grid.vol()];
    for j in 0..grid.dim() {
        let dj = diff_bwd(&grid, j, f.component(j));
        for (o, v) in out.iter_mut().zip(&dj) {
            *o += v;
        }
    }
    ScalarField::from_values(grid, out).expect("length is vol")
}

/// Plaquette curl `(curl q)_{jk} = D+_j q_k - D+_k q_j` for `j < k`.
pub fn curl_plaquette(q: &EdgeField) -> PlaquetteField {
    let grid = q.grid();
    let mut out = PlaquetteField::zeros(grid);
    for (j, k) in grid.pairs() {
        let a = diff_fwd(&grid, j, q.component(k));
        let b = diff_fwd(&grid, k, q.component(j));
        let p = grid.pair_index(j, k);
        for (o, (x, y)) in out.pair_mut(p).iter_mut().zip(a.iter().zip(&b)) {
            *o = x - y;
        }
    }
    out
}

/// Tensor divergence `(div sigma)_j = sum_k D-_k sigma_{jk}` using the
/// implied skew symmetry.
pub fn divergence_tensor(sigma: &PlaquetteField) -> EdgeField {
    let grid = sigma.grid();
    let mut out = EdgeField::zeros(grid);
    for j in 0..grid.dim() {
        for k in 0..grid.dim() {
            if k == j {
                continue;
            }
            let (p, sign) = if j < k {
                (grid.pair_index(j, k), 1.0)
            } else {
                (grid.pair_index(k, j), -1.0)
            };
            let dk = diff_bwd(&grid, k, sigma.pair(p));
            for (o, v) in out.component_mut(j).iter_mut().zip(&dk) {
                *o += sign * v;
            }
        }
    }
    out
}

/// Standard (2d+1)-point lattice Laplacian `div(grad u)`.
pub fn laplacian(u: &ScalarField) -> ScalarField {
    divergence_bwd(&gradient_fwd(u))
}

/// Centered site gradient `(D0_i u)` for all axes, one site field per axis.
pub fn gradient_ctr(u: &ScalarField) -> Vec<ScalarField> {
    let grid = u.grid();
    (0..grid.dim())
        .map(|i| ScalarField::from_values(grid, diff_ctr(&grid, i, u.values())).unwrap())
        .collect()
}

/// Interpolates a site field to the edge midpoints of direction `j`.
pub fn to_edge(site: &ScalarField, j: usize) -> Vec<f64> {
    avg_fwd(&site.grid(), j, site.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{inner, FieldNorms};
    use proptest::prelude::*;

    fn grid(d: usize, n: usize) -> PeriodicGrid {
        PeriodicGrid::new(d, n, 1.0).unwrap()
    }

    fn rng_field(grid: PeriodicGrid, seed: u64) -> ScalarField {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_values(grid, (0..grid.vol()).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn rng_edge(grid: PeriodicGrid, seed: u64) -> EdgeField {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 99);
        EdgeField::from_values(
            grid,
            (0..grid.dim() * grid.vol()).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = grid(3, 8);
        let u = ScalarField::constant(g, 5.0);
        assert_eq!(gradient_fwd(&u).lp_norm(f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_definition_1d() {
        let g = grid(1, 4);
        let u = ScalarField::from_values(g, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let du = gradient_fwd(&u);
        assert_eq!(du.component(0), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn divergence_of_constant_is_zero() {
        let g = grid(2, 8);
        let mut f = EdgeField::zeros(g);
        f.component_mut(0).fill(2.0);
        f.component_mut(1).fill(-7.0);
        assert_eq!(divergence_bwd(&f).lp_norm(f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn divergence_of_gradient_sums_to_zero() {
        let g = grid(2, 8);
        let u = rng_field(g, 3);
        let s: f64 = divergence_bwd(&gradient_fwd(&u)).values().iter().sum();
        assert!(s.abs() < 1e-12);
    }

    /// Adjointness oracle by direct summation: <F, grad u> = -<div F, u>.
    #[test]
    fn adjointness_direct_summation() {
        for d in 1..=3 {
            let g = grid(d, 8);
            let u = rng_field(g, d as u64);
            let f = rng_edge(g, d as u64);
            let cell = g.cell_volume();
            // oracle: term-by-term summation over explicit neighbor indices
            let mut lhs = 0.0;
            for j in 0..d {
                let c = f.component(j);
                for idx in 0..g.vol() {
                    let up = g.shift(idx, j, 1);
                    lhs += c[idx] * (u.values()[up] - u.values()[idx]) / g.spacing();
                }
            }
            lhs *= cell;
            let rhs = -inner(divergence_bwd(&f).values(), u.values(), cell);
            let scale = f.lp_norm(2.0).unwrap() * u.lp_norm(2.0).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
            // the implementation agrees with the oracle
            let impl_lhs = inner(f.values(), gradient_fwd(&u).values(), cell);
            assert!((impl_lhs - lhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn curl_of_gradient_vanishes_exactly() {
        for d in 2..=3 {
            let g = grid(d, 8);
            let u = rng_field(g, 17 + d as u64);
            let c = curl_plaquette(&gradient_fwd(&u));
            assert_eq!(c.lp_norm(f64::INFINITY).unwrap(), 0.0);
        }
    }

    #[test]
    fn curl_of_constant_vanishes() {
        let g = grid(2, 4);
        let mut q = EdgeField::zeros(g);
        q.component_mut(0).fill(1.5);
        q.component_mut(1).fill(-2.0);
        assert_eq!(curl_plaquette(&q).lp_norm(f64::INFINITY).unwrap(), 0.0);
    }

    /// Hand-computed stencil for a d=2 single mode.
    #[test]
    fn curl_single_mode_matches_stencil() {
        let g = grid(2, 8);
        let n = 8;
        let kx = 2.0 * std::f64::consts::PI / n as f64;
        let mut q = EdgeField::zeros(g);
        for idx in 0..g.vol() {
            let c = g.coords(idx);
            q.component_mut(1)[idx] = (kx * c[0] as f64).sin();
        }
        let curl = curl_plaquette(&q);
        let p = curl.pair(0);
        for idx in 0..g.vol() {
            let c = g.coords(idx);
            let x = c[0] as f64;
            let want = ((kx * (x + 1.0)).sin() - (kx * x).sin()) / g.spacing();
            assert!((p[idx] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn div_of_div_tensor_vanishes_exactly() {
        for d in 2..=3 {
            let g = grid(d, 8);
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let mut sig = PlaquetteField::zeros(g);
            for v in sig.values_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
            let dd = divergence_bwd(&divergence_tensor(&sig));
            assert!(dd.lp_norm(f64::INFINITY).unwrap() < 1e-13);
        }
    }

    /// Direct-summation stencil oracle for the tensor divergence.
    #[test]
    fn divergence_tensor_matches_stencil_oracle() {
        let g = grid(3, 4);
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut sig = PlaquetteField::zeros(g);
        for v in sig.values_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let ds = divergence_tensor(&sig);
        for j in 0..3 {
            for idx in 0..g.vol() {
                let mut want = 0.0;
                for k in 0..3 {
                    if k == j {
                        continue;
                    }
                    let dn = g.shift(idx, k, -1);
                    want += (sig.entry(j, k, idx) - sig.entry(j, k, dn)) / g.spacing();
                }
                assert!((ds.component(j)[idx] - want).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn laplacian_is_stencil() {
        let g = grid(2, 8);
        let u = rng_field(g, 7);
        let lap = laplacian(&u);
        for idx in 0..g.vol() {
            let mut want = -4.0 * u.values()[idx];
            for j in 0..2 {
                want += u.values()[g.shift(idx, j, 1)] + u.values()[g.shift(idx, j, -1)];
            }
            assert!((lap.values()[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_gradient_is_zero() {
        let g = grid(3, 4);
        let u = rng_field(g, 23);
        for m in gradient_fwd(&u).component_means() {
            assert!(m.abs() < 1e-14);
        }
    }

    #[test]
    fn product_rules_are_exact() {
        let g = grid(2, 8);
        let f = rng_field(g, 1);
        let w = rng_field(g, 2);
        let prod =
            ScalarField::from_values(g, f.values().iter().zip(w.values()).map(|(a, b)| a * b).collect())
                .unwrap();
        for j in 0..2 {
            let lhs = diff_fwd(&g, j, prod.values());
            let af = avg_fwd(&g, j, f.values());
            let aw = avg_fwd(&g, j, w.values());
            let df = diff_fwd(&g, j, f.values());
            let dw = diff_fwd(&g, j, w.values());
            for i in 0..g.vol() {
                let rhs = af[i] * dw[i] + aw[i] * df[i];
                assert!((lhs[i] - rhs).abs() < 1e-13);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_adjointness(seed in 0u64..1000) {
            let g = grid(2, 8);
            let u = rng_field(g, seed);
            let f = rng_edge(g, seed);
            let cell = g.cell_volume();
            let lhs = inner(f.values(), gradient_fwd(&u).values(), cell);
            let rhs = -inner(divergence_bwd(&f).values(), u.values(), cell);
            let scale = f.lp_norm(2.0).unwrap() * u.lp_norm(2.0).unwrap() + 1e-300;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn prop_curl_grad_zero(seed in 0u64..1000) {
            let g = grid(3, 4);
            let u = rng_field(g, seed);
            prop_assert_eq!(curl_plaquette(&gradient_fwd(&u)).lp_norm(f64::INFINITY).unwrap(), 0.0);
        }
    }
}
