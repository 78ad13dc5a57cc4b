//! Multidimensional FFT on the periodic lattice and the discrete symbols of
//! the difference operators.

use crate::grid::PeriodicGrid;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            })
            .clone()
    })
}

/// In-place d-dimensional transform, axis by axis. The forward transform is
/// the plain unnormalized DFT sum; the inverse carries the `1/n^d` factor.
pub fn fft_nd(grid: &PeriodicGrid, data: &mut [Complex<f64>], inverse: bool) {
    let n = grid.points_per_side();
    let fft = plan(n, inverse);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..grid.dim() {
        let s = grid.stride(axis);
        grid.for_each_line(axis, |base| {
            for (t, item) in line.iter_mut().enumerate() {
                *item = data[base + t * s];
            }
            fft.process(&mut line);
            for (t, item) in line.iter().enumerate() {
                data[base + t * s] = *item;
            }
        });
    }
    if inverse {
        let scale = 1.0 / grid.vol() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

pub fn to_complex(values: &[f64]) -> Vec<Complex<f64>> {
    values.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

pub fn to_real(values: &[Complex<f64>]) -> Vec<f64> {
    values.iter().map(|v| v.re).collect()
}

/// Per-axis discrete symbols of the difference operators on a given grid.
///
/// With `omega = 2 pi m / n` the integer mode of an axis index `m`:
/// - `lambda[m]` is the forward-difference symbol `(e^{i omega} - 1)/h`
///   (so `D-` has symbol `-conj(lambda)` and `-div grad` has `|lambda|^2`),
/// - `lam2[m] = |lambda[m]|^2`,
/// - `ctr[m] = sin(omega)/h`, the centered-difference symbol over `i`.
pub struct Symbols {
    pub lambda: Vec<Complex<f64>>,
    pub lam2: Vec<f64>,
    pub ctr: Vec<f64>,
}

impl Symbols {
    pub fn new(grid: &PeriodicGrid) -> Self {
        let n = grid.points_per_side();
        let h = grid.spacing();
        let mut lambda = Vec::with_capacity(n);
        let mut lam2 = Vec::with_capacity(n);
        let mut ctr = Vec::with_capacity(n);
        for m in 0..n {
            let omega = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
            let l = (Complex::new(omega.cos(), omega.sin()) - 1.0) / h;
            lambda.push(l);
            lam2.push(l.norm_sqr());
            ctr.push(omega.sin() / h);
        }
        Self { lambda, lam2, ctr }
    }
}

/// Helper iterating all wavevectors with their per-axis mode indices.
/// Calls `f(flat_index, modes)` where `modes[axis] in 0..n`.
pub fn for_each_mode(grid: &PeriodicGrid, mut f: impl FnMut(usize, &[usize; 3])) {
    let d = grid.dim();
    let n = grid.points_per_side();
    let mut modes = [0usize; 3];
    for idx in 0..grid.vol() {
        f(idx, &modes);
        for axis in 0..d {
            modes[axis] += 1;
            if modes[axis] < n {
                break;
            }
            modes[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicGrid;

    #[test]
    fn round_trip() {
        let g = PeriodicGrid::new(2, 8, 1.0).unwrap();
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let orig: Vec<f64> = (0..g.vol()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut data = to_complex(&orig);
        fft_nd(&g, &mut data, false);
        fft_nd(&g, &mut data, true);
        for (a, b) in orig.iter().zip(&data) {
            assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
        }
    }

    /// Parseval oracle pinning the transform convention: for a single real
    /// cosine mode of amplitude A, the L^2 norm over the torus is
    /// `A (L^d / 2)^{1/2}`.
    #[test]
    fn parseval_single_mode() {
        use crate::field::{FieldNorms, ScalarField};
        let g = PeriodicGrid::new(2, 16, 0.5).unwrap();
        let amp = 3.0;
        let f = ScalarField::from_fn(g, |c| {
            amp * (2.0 * std::f64::consts::PI * c[0] as f64 / 16.0).cos()
        });
        let want = amp * (g.side_length().powi(2) / 2.0).sqrt();
        assert!((f.lp_norm(2.0).unwrap() - want).abs() < 1e-10);
        // and the FFT sees exactly two symmetric coefficients of size vol/2
        let mut data = to_complex(f.values());
        fft_nd(&g, &mut data, false);
        let idx = 1; // mode (1,0)
        assert!((data[idx].re - amp * g.vol() as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn forward_symbol_matches_operator() {
        let g = PeriodicGrid::new(1, 8, 0.25).unwrap();
        let sym = Symbols::new(&g);
        // apply D+ spectrally and physically to a random field
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut data = to_complex(&vals);
        fft_nd(&g, &mut data, false);
        for (m, v) in data.iter_mut().enumerate() {
            *v *= sym.lambda[m];
        }
        fft_nd(&g, &mut data, true);
        let phys = crate::ops::diff_fwd(&g, 0, &vals);
        for (a, b) in phys.iter().zip(&data) {
            assert!((a - b.re).abs() < 1e-12);
        }
    }
}
