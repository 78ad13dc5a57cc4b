//! Extended correctors: the massless triple `(phi_i, q_i, sigma_i)` with the
//! box homogenized coefficient, the massive quadruple
//! `(phi_T, sigma_T, psi_T, abar_T)`, their defining identities as residual
//! reports, moment statistics of corrector increments, and the
//! finite-difference check of the Malliavin representation of corrector
//! averages.
//!
//! The construction keeps the flux identity
//! `q_i = abar e_i + div sigma_i (+ psi_T/T)` at solver tolerance: the only
//! inexactness is the CG residual of the cell problem, which enters the
//! identity through the massive Helmholtz projection with operator norm one.

use crate::ensemble::{moment_estimate_from_powers, MomentEstimate};
use crate::error::{Result, ShlError};
use crate::field::{EdgeField, FieldNorms, PlaquetteField, ScalarField};
use crate::grid::PeriodicGrid;
use crate::ops::{curl_plaquette, divergence_bwd, divergence_tensor};
use crate::randomfield::CoefficientField;
use crate::seed;
use crate::solver::{
    solve_variable_with, MassiveProblem, SolverConfig, SpectralSolver,
};
use crate::tensor::Tensor;
use serde::Serialize;

/// Dimension-dependent sublinearity scale: `sqrt(r+1)` for d=1,
/// `ln^{1/2}(r+2)` for d=2, `1` for d>2.
pub fn mu_d(r: f64, d: usize) -> f64 {
    match d {
        1 => (r + 1.0).sqrt(),
        2 => (r + 2.0).ln().sqrt(),
        _ => 1.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectorResiduals {
    /// `||div q_i||_2 / ||div(a e_i)||_2` per direction (flux conservation).
    pub flux_divergence: Vec<f64>,
    /// `||q_i - abar_box e_i - div sigma_i||_2 / ||q_i||_2` per direction.
    pub flux_identity: Vec<f64>,
    /// Relative residual reported by the cell-problem solves.
    pub solver: Vec<f64>,
}

/// Massless extended correctors of one coefficient sample.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub phi: Vec<ScalarField>,
    pub q: Vec<EdgeField>,
    pub sigma: Vec<PlaquetteField>,
    pub abar_box: Tensor,
    pub residuals: CorrectorResiduals,
    /// Pooled harmonic mean of the edge coefficients (Reuss bound).
    pub a_harmonic_mean: f64,
    /// Pooled arithmetic mean (Voigt bound).
    pub a_arithmetic_mean: f64,
}

fn flux_of(a: &CoefficientField, dir: usize, grad_phi: &EdgeField) -> EdgeField {
    let grid = a.grid();
    let mut q = EdgeField::zeros(grid);
    for j in 0..grid.dim() {
        let aj = a.component(j);
        let gj = grad_phi.component(j);
        let qj = q.component_mut(j);
        if j == dir {
            for ((o, &av), &gv) in qj.iter_mut().zip(aj).zip(gj) {
                *o = av * (1.0 + gv);
            }
        } else {
            for ((o, &av), &gv) in qj.iter_mut().zip(aj).zip(gj) {
                *o = av * gv;
            }
        }
    }
    q
}

fn unit_rhs(a: &CoefficientField, dir: usize) -> EdgeField {
    let grid = a.grid();
    let mut f = EdgeField::zeros(grid);
    f.component_mut(dir).copy_from_slice(a.component(dir));
    f
}

/// Solves the cell problems `-div(a (grad phi_i + e_i)) = 0`, forms the
/// fluxes and the box coefficient `abar_box e_i = mean(q_i)`, and fixes the
/// gauge `-Lap sigma_i = curl q_i` with mean-zero components.
pub fn compute_correctors(a: &CoefficientField, config: &SolverConfig) -> Result<CorrectorSet> {
    let grid = a.grid();
    let spectral = SpectralSolver::new(&grid);
    compute_correctors_with(&spectral, a, config)
}

pub fn compute_correctors_with(
    spectral: &SpectralSolver,
    a: &CoefficientField,
    config: &SolverConfig,
) -> Result<CorrectorSet> {
    let grid = a.grid();
    let d = grid.dim();
    let tight = SolverConfig { tol: config.corrector_tol(), ..*config };
    let id = Tensor::identity(d);

    let mut phi = Vec::with_capacity(d);
    let mut q = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    let mut abar_box = Tensor::zeros(d);
    let mut flux_divergence = Vec::with_capacity(d);
    let mut flux_identity = Vec::with_capacity(d);
    let mut solver_res = Vec::with_capacity(d);

    for i in 0..d {
        let f = unit_rhs(a, i);
        let problem =
            MassiveProblem::new(a.clone(), f64::INFINITY, ScalarField::zeros(grid), f)?;
        let sol = solve_variable_with(spectral, &problem, &tight)?;
        solver_res.push(sol.residual);
        let qi = flux_of(a, i, &sol.grad_u);

        let means = qi.component_means();
        for (j, m) in means.iter().enumerate() {
            abar_box.set(j, i, *m);
        }

        let div_q = divergence_bwd(&qi);
        let b_scale = divergence_bwd(&unit_rhs(a, i)).lp_norm(2.0)?;
        flux_divergence.push(div_q.lp_norm(2.0)? / b_scale.max(1e-300));

        // gauge: -Lap sigma_{ijk} = (curl q_i)_{jk}, mean-zero per component
        let curl = curl_plaquette(&qi);
        let mut sig = PlaquetteField::zeros(grid);
        for p in 0..grid.pair_count() {
            let solved = spectral.solve_rhs(&id, 0.0, curl.pair(p))?;
            sig.pair_mut(p).copy_from_slice(&solved);
        }

        // residual of the flux identity q_i = abar e_i + div sigma_i
        let div_sig = divergence_tensor(&sig);
        let mut defect: f64 = 0.0;
        let mut qnorm: f64 = 0.0;
        for j in 0..d {
            let qj = qi.component(j);
            let dj = div_sig.component(j);
            let target = abar_box.get(j, i);
            for (qv, dv) in qj.iter().zip(dj) {
                let r = qv - target - dv;
                defect += r * r;
                qnorm += qv * qv;
            }
        }
        flux_identity.push((defect / qnorm.max(1e-300)).sqrt());

        phi.push(sol.u);
        q.push(qi);
        sigma.push(sig);
    }

    let a_harmonic_mean = a.harmonic_mean();
    let a_arithmetic_mean = a.mean();
    Ok(CorrectorSet {
        phi,
        q,
        sigma,
        abar_box,
        residuals: CorrectorResiduals { flux_divergence, flux_identity, solver: solver_res },
        a_harmonic_mean,
        a_arithmetic_mean,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MassiveResiduals {
    /// Relative residual of `(1/T) phi_T - div(a(grad phi_T + e_i)) = 0`.
    pub corrector_eq: Vec<f64>,
    /// `||q_T - abar_T e_i - div sigma_T - psi_T/T||_2 / ||q_T||_2`.
    pub flux_identity: Vec<f64>,
}

/// Massive extended correctors `(phi_T, sigma_T, psi_T)` at cutoff `T`.
#[derive(Debug, Clone)]
pub struct MassiveCorrectorSet {
    pub t: f64,
    pub phi: Vec<ScalarField>,
    pub q: Vec<EdgeField>,
    pub sigma: Vec<PlaquetteField>,
    pub psi: Vec<EdgeField>,
    pub abar_t: Tensor,
    pub residuals: MassiveResiduals,
}

/// Solves the three massive families: the corrector equation for `phi_T,i`,
/// the gauge `(1/T - Lap) sigma_T = curl q_T`, and
/// `(1/T - Lap) psi_T = q_T - abar_T e_i - grad phi_T`.
pub fn compute_massive_correctors(
    a: &CoefficientField,
    t: f64,
    config: &SolverConfig,
) -> Result<MassiveCorrectorSet> {
    let grid = a.grid();
    let spectral = SpectralSolver::new(&grid);
    compute_massive_correctors_with(&spectral, a, t, config)
}

pub fn compute_massive_correctors_with(
    spectral: &SpectralSolver,
    a: &CoefficientField,
    t: f64,
    config: &SolverConfig,
) -> Result<MassiveCorrectorSet> {
    if !t.is_finite() {
        return Err(ShlError::InvalidArgument("massive correctors need T < inf".into()));
    }
    let grid = a.grid();
    let d = grid.dim();
    let inv_t = 1.0 / t;
    let tight = SolverConfig { tol: config.corrector_tol(), ..*config };
    let id = Tensor::identity(d);

    let mut phi = Vec::with_capacity(d);
    let mut q = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    let mut psi = Vec::with_capacity(d);
    let mut abar_t = Tensor::zeros(d);
    let mut corrector_eq = Vec::with_capacity(d);
    let mut flux_identity = Vec::with_capacity(d);

    for i in 0..d {
        let f = unit_rhs(a, i);
        let problem = MassiveProblem::new(a.clone(), t, ScalarField::zeros(grid), f)?;
        let sol = solve_variable_with(spectral, &problem, &tight)?;
        corrector_eq.push(sol.residual);
        let qi = flux_of(a, i, &sol.grad_u);
        let means = qi.component_means();
        for (j, m) in means.iter().enumerate() {
            abar_t.set(j, i, *m);
        }

        let curl = curl_plaquette(&qi);
        let mut sig = PlaquetteField::zeros(grid);
        for p in 0..grid.pair_count() {
            let solved = spectral.solve_rhs(&id, inv_t, curl.pair(p))?;
            sig.pair_mut(p).copy_from_slice(&solved);
        }

        let mut ps = EdgeField::zeros(grid);
        for j in 0..d {
            let mut rhs: Vec<f64> = qi.component(j).to_vec();
            let target = abar_t.get(j, i);
            for (rv, gv) in rhs.iter_mut().zip(sol.grad_u.component(j)) {
                *rv -= target + gv;
            }
            let solved = spectral.solve_rhs(&id, inv_t, &rhs)?;
            ps.component_mut(j).copy_from_slice(&solved);
        }

        let div_sig = divergence_tensor(&sig);
        let mut defect: f64 = 0.0;
        let mut qnorm: f64 = 0.0;
        for j in 0..d {
            let qj = qi.component(j);
            let dj = div_sig.component(j);
            let pj = ps.component(j);
            let target = abar_t.get(j, i);
            for ((qv, dv), pv) in qj.iter().zip(dj).zip(pj) {
                let r = qv - target - dv - inv_t * pv;
                defect += r * r;
                qnorm += qv * qv;
            }
        }
        flux_identity.push((defect / qnorm.max(1e-300)).sqrt());

        phi.push(sol.u);
        q.push(qi);
        sigma.push(sig);
        psi.push(ps);
    }

    Ok(MassiveCorrectorSet {
        t,
        phi,
        q,
        sigma,
        psi,
        abar_t,
        residuals: MassiveResiduals { corrector_eq, flux_identity },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogenizedEstimate {
    pub abar: Tensor,
    /// Per-entry 90% normal confidence half-widths.
    pub ci_half_width: Tensor,
    pub n: usize,
    /// Ensemble Reuss (harmonic) and Voigt (arithmetic) bounds with their
    /// standard errors.
    pub harmonic_bound: f64,
    pub harmonic_se: f64,
    pub arithmetic_bound: f64,
    pub arithmetic_se: f64,
    /// Eigenvalues of the symmetrized estimate lie in
    /// `[harmonic - 3 se, arithmetic + 3 se]`.
    pub voigt_reuss_pass: bool,
}

/// Averages `abar_box` over samples with per-entry confidence intervals and
/// checks the spectrum against the Voigt-Reuss bracket estimated from the
/// same samples.
pub fn homogenized_estimate(sets: &[CorrectorSet]) -> Result<HomogenizedEstimate> {
    if sets.is_empty() {
        return Err(ShlError::InvalidArgument("need at least one corrector set".into()));
    }
    let d = sets[0].abar_box.d;
    let n = sets.len();
    let mut mean = Tensor::zeros(d);
    for s in sets {
        mean = mean.add(&s.abar_box);
    }
    mean = mean.scale(1.0 / n as f64);
    let mut ci = Tensor::zeros(d);
    if n > 1 {
        for i in 0..d {
            for j in 0..d {
                let var = sets
                    .iter()
                    .map(|s| (s.abar_box.get(i, j) - mean.get(i, j)).powi(2))
                    .sum::<f64>()
                    / (n - 1) as f64;
                ci.set(i, j, 1.645 * (var / n as f64).sqrt());
            }
        }
    }
    let stat = |vals: Vec<f64>| -> (f64, f64) {
        let m = vals.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return (m, 0.0);
        }
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        (m, (var / n as f64).sqrt())
    };
    let (harm, harm_se) = stat(sets.iter().map(|s| s.a_harmonic_mean).collect());
    let (arith, arith_se) = stat(sets.iter().map(|s| s.a_arithmetic_mean).collect());
    let ev = mean.sym_eigenvalues();
    let lo = harm - 3.0 * harm_se;
    let hi = arith + 3.0 * arith_se;
    let pass = ev.iter().all(|&e| e >= lo - 1e-12 && e <= hi + 1e-12);
    Ok(HomogenizedEstimate {
        abar: mean,
        ci_half_width: ci,
        n,
        harmonic_bound: harm,
        harmonic_se: harm_se,
        arithmetic_bound: arith,
        arithmetic_se: arith_se,
        voigt_reuss_pass: pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LagMoment {
    /// Lag distance `|x|` in length units.
    pub lag: f64,
    /// Moment of `|phi(x) - phi(0)|` over all directions.
    pub phi: MomentEstimate,
    /// Moment of the full extended increment `|(phi, sigma)(x) - (phi, sigma)(0)|`.
    pub extended: MomentEstimate,
}

/// Monte-Carlo estimates of `<|(phi,sigma)(x)-(phi,sigma)(0)|^{2r}>^{1/r}`
/// at axis-aligned lags, spatially averaged over the base point (unbiased by
/// stationarity) and over the d axis directions.
pub fn corrector_increment_moments(
    sets: &[CorrectorSet],
    lags: &[usize],
    r_order: usize,
    seed_val: u64,
) -> Result<Vec<LagMoment>> {
    if sets.is_empty() {
        return Err(ShlError::InvalidArgument("empty ensemble".into()));
    }
    let grid = sets[0].phi[0].grid();
    let n = grid.points_per_side();
    let mut out = Vec::with_capacity(lags.len());
    for &lag in lags {
        if lag > n / 4 {
            return Err(ShlError::InvalidArgument(format!(
                "lag {lag} exceeds n/4 = {}",
                n / 4
            )));
        }
        let mut phi_powers = Vec::with_capacity(sets.len());
        let mut ext_powers = Vec::with_capacity(sets.len());
        for set in sets {
            let (phi_p, ext_p) = increment_power(&grid, set, lag, r_order);
            phi_powers.push(phi_p);
            ext_powers.push(ext_p);
        }
        let phi = moment_estimate_from_powers(
            &phi_powers,
            r_order,
            seed::split(seed_val, lag as u64),
        )?;
        let extended = moment_estimate_from_powers(
            &ext_powers,
            r_order,
            seed::split(seed_val, lag as u64 + 1_000_003),
        )?;
        out.push(LagMoment { lag: lag as f64 * grid.spacing(), phi, extended });
    }
    Ok(out)
}

/// Per-sample spatially averaged increment powers for a list of lags, for
/// streaming ensembles that do not keep the corrector sets alive.
pub fn increment_powers(set: &CorrectorSet, lags: &[usize], r_order: usize) -> Vec<(f64, f64)> {
    let grid = set.phi[0].grid();
    lags.iter().map(|&lag| increment_power(&grid, set, lag, r_order)).collect()
}

fn increment_power(
    grid: &PeriodicGrid,
    set: &CorrectorSet,
    lag: usize,
    r_order: usize,
) -> (f64, f64) {
    if lag == 0 {
        return (0.0, 0.0);
    }
    let d = grid.dim();
    let vol = grid.vol();
    let mut phi_acc = 0.0;
    let mut ext_acc = 0.0;
    for axis in 0..d {
        for idx in 0..vol {
            let other = grid.shift(idx, axis, lag as isize);
            let mut phi2 = 0.0;
            for phi_i in &set.phi {
                let dphi = phi_i.values()[other] - phi_i.values()[idx];
                phi2 += dphi * dphi;
            }
            let mut sig2 = 0.0;
            for sig_i in &set.sigma {
                for p in 0..grid.pair_count() {
                    let ds = sig_i.pair(p)[other] - sig_i.pair(p)[idx];
                    sig2 += ds * ds;
                }
            }
            phi_acc += phi2.powi(r_order as i32);
            ext_acc += (phi2 + sig2).powi(r_order as i32);
        }
    }
    let count = (d * vol) as f64;
    (phi_acc / count, ext_acc / count)
}

/// Perturbed coefficient `a + eps * delta`, with the ellipticity floor
/// recomputed; errors when the perturbation drives any edge nonpositive.
pub fn perturbed_coefficient(
    a: &CoefficientField,
    delta: &EdgeField,
    eps: f64,
) -> Result<CoefficientField> {
    let grid = a.grid();
    if delta.grid() != grid {
        return Err(ShlError::GridMismatch("perturbation grid".into()));
    }
    let mut comps = Vec::with_capacity(grid.dim());
    let mut min = f64::INFINITY;
    for j in 0..grid.dim() {
        let vals: Vec<f64> = a
            .component(j)
            .iter()
            .zip(delta.component(j))
            .map(|(&av, &dv)| {
                let v = av + eps * dv;
                if v < min {
                    min = v;
                }
                v
            })
            .collect();
        comps.push(vals);
    }
    if min <= 0.0 {
        return Err(ShlError::PerturbationBreaksEllipticity { eps });
    }
    Ok(CoefficientField::new(EdgeField::from_components(grid, comps)?, min.min(a.lambda())))
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityReport {
    /// `(eps, relative error)` for `F(a) = int g . grad phi_i`.
    pub rel_errors: Vec<(f64, f64)>,
    /// Log-log slope of the relative error against eps.
    pub slope: f64,
    /// Same for the flux functional `F*(a) = int g . (q_i - abar e_i)`.
    pub flux_rel_errors: Vec<(f64, f64)>,
    pub flux_slope: f64,
}

/// Central-difference check of the Malliavin representations
/// `dF/da = grad v (x) grad u_i` with `div(a grad v + g) = 0`, and for the
/// flux functional `dF*/da = (grad v* + g) (x) grad u_i` with
/// `div(a (grad v* + g)) = 0`, contracted against a diagonal edge
/// perturbation. The frozen `abar e_i` term of `F*` is deterministic and
/// drops out of both sides.
pub fn corrector_sensitivity_check(
    a: &CoefficientField,
    dir: usize,
    g_test: &EdgeField,
    delta_a: &EdgeField,
    eps_list: &[f64],
    config: &SolverConfig,
) -> Result<SensitivityReport> {
    let grid = a.grid();
    let d = grid.dim();
    let cell = grid.cell_volume();
    let spectral = SpectralSolver::new(&grid);
    let tight = SolverConfig { tol: config.corrector_tol(), ..*config };

    // base corrector and the two dual solves
    let base = solve_cell(&spectral, a, dir, &tight)?;
    let dual = MassiveProblem::new(a.clone(), f64::INFINITY, ScalarField::zeros(grid), g_test.clone())?;
    let v = solve_variable_with(&spectral, &dual, &tight)?;
    let mut ag = EdgeField::zeros(grid);
    for j in 0..d {
        for ((o, &av), &gv) in ag
            .component_mut(j)
            .iter_mut()
            .zip(a.component(j))
            .zip(g_test.component(j))
        {
            *o = av * gv;
        }
    }
    let dual_flux =
        MassiveProblem::new(a.clone(), f64::INFINITY, ScalarField::zeros(grid), ag)?;
    let v_star = solve_variable_with(&spectral, &dual_flux, &tight)?;

    // predicted directional derivatives
    let mut d_phi = 0.0;
    let mut d_flux = 0.0;
    for j in 0..d {
        let gv = v.grad_u.component(j);
        let gvs = v_star.grad_u.component(j);
        let gu = base.grad_u.component(j);
        let da = delta_a.component(j);
        let gt = g_test.component(j);
        for idx in 0..grid.vol() {
            let e_i = if j == dir { 1.0 } else { 0.0 } + gu[idx];
            d_phi += gv[idx] * da[idx] * e_i;
            d_flux += (gvs[idx] + gt[idx]) * da[idx] * e_i;
        }
    }
    d_phi *= cell;
    d_flux *= cell;

    let f_of = |set_grad: &EdgeField| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let gt = g_test.component(j);
            let gp = set_grad.component(j);
            for (a, b) in gt.iter().zip(gp) {
                acc += a * b;
            }
        }
        cell * acc
    };
    let fstar_of = |a_pert: &CoefficientField, grad: &EdgeField| -> f64 {
        let q = flux_of(a_pert, dir, grad);
        let mut acc = 0.0;
        for j in 0..d {
            let gt = g_test.component(j);
            let qj = q.component(j);
            for (a, b) in gt.iter().zip(qj) {
                acc += a * b;
            }
        }
        // frozen abar term: deterministic, identical on both sides of the
        // central difference
        cell * acc
    };

    let mut rel_errors = Vec::with_capacity(eps_list.len());
    let mut flux_rel_errors = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let a_plus = perturbed_coefficient(a, delta_a, eps)?;
        let a_minus = perturbed_coefficient(a, delta_a, -eps)?;
        let sol_plus = solve_cell(&spectral, &a_plus, dir, &tight)?;
        let sol_minus = solve_cell(&spectral, &a_minus, dir, &tight)?;
        let fd_phi = (f_of(&sol_plus.grad_u) - f_of(&sol_minus.grad_u)) / (2.0 * eps);
        let fd_flux = (fstar_of(&a_plus, &sol_plus.grad_u)
            - fstar_of(&a_minus, &sol_minus.grad_u))
            / (2.0 * eps);
        rel_errors.push((eps, (fd_phi - d_phi).abs() / d_phi.abs().max(1e-300)));
        flux_rel_errors.push((eps, (fd_flux - d_flux).abs() / d_flux.abs().max(1e-300)));
    }
    let slope = fit_slope(&rel_errors);
    let flux_slope = fit_slope(&flux_rel_errors);
    Ok(SensitivityReport { rel_errors, slope, flux_rel_errors, flux_slope })
}

fn solve_cell(
    spectral: &SpectralSolver,
    a: &CoefficientField,
    dir: usize,
    config: &SolverConfig,
) -> Result<crate::solver::Solution> {
    let grid = a.grid();
    let problem = MassiveProblem::new(
        a.clone(),
        f64::INFINITY,
        ScalarField::zeros(grid),
        unit_rhs(a, dir),
    )?;
    solve_variable_with(spectral, &problem, config)
}

pub(crate) fn fit_slope(pairs: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(_, r)| *r > 0.0)
        .map(|(e, r)| (e.ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradient_fwd;
    use crate::randomfield::{sample_coefficient, CoefficientMap, CovarianceSpec};

    fn grid(d: usize, n: usize) -> PeriodicGrid {
        PeriodicGrid::new(d, n, 1.0).unwrap()
    }

    fn sample_a(g: &PeriodicGrid, lambda: f64, seed: u64) -> CoefficientField {
        let cov = CovarianceSpec::new(1.0, 1.0).unwrap();
        let map = CoefficientMap::sigmoid(lambda).unwrap();
        sample_coefficient(g, &cov, &map, seed).unwrap()
    }

    #[test]
    fn mu_d_paper_values() {
        assert!((mu_d(3.0, 1) - 2.0).abs() < 1e-15);
        assert!((mu_d(1000.0, 3) - 1.0).abs() < 1e-15);
        assert!((mu_d(0.0, 2) - 2.0f64.ln().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_coefficient_correctors_vanish() {
        let g = grid(2, 8);
        let a = CoefficientField::constant(g, 0.7);
        let set = compute_correctors(&a, &SolverConfig::default()).unwrap();
        for i in 0..2 {
            assert!(set.phi[i].lp_norm(f64::INFINITY).unwrap() < 1e-12);
            assert!(set.sigma[i].lp_norm(f64::INFINITY).unwrap() < 1e-12);
            assert!((set.abar_box.get(i, i) - 0.7).abs() < 1e-13);
        }
        assert!((set.abar_box.get(0, 1)).abs() < 1e-13);
    }

    /// d=1 closed form: abar_box is the harmonic mean to 1e-12, and the flux
    /// is spatially constant.
    #[test]
    fn d1_harmonic_mean_exact() {
        let g = grid(1, 256);
        let a = sample_a(&g, 0.25, 3);
        let config = SolverConfig::default();
        let set = compute_correctors(&a, &config).unwrap();
        let harm = a.harmonic_mean();
        assert!(
            (set.abar_box.get(0, 0) - harm).abs() < 1e-12,
            "abar {} vs harmonic mean {}",
            set.abar_box.get(0, 0),
            harm
        );
        // flux constancy to 10 tol
        let q = &set.q[0];
        let dev: f64 = q
            .component(0)
            .iter()
            .map(|v| (v - harm) * (v - harm))
            .sum::<f64>()
            .sqrt();
        let qn: f64 = q.component(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dev <= 10.0 * config.tol * qn);
        // phi' = abar/a - 1 pointwise
        let gphi = gradient_fwd(&set.phi[0]);
        for (idx, &gv) in gphi.component(0).iter().enumerate() {
            let want = harm / a.component(0)[idx] - 1.0;
            assert!((gv - want).abs() < 1e-9);
        }
    }

    /// d=2 laminate: a = a(x_1) diagonal gives abar = diag(harmonic, arithmetic).
    #[test]
    fn d2_laminate_oracle() {
        let g = grid(2, 32);
        let mut rng = crate::seed::rng_for(5);
        use rand::Rng;
        let profile_a: Vec<f64> = (0..32).map(|_| rng.gen_range(0.25..1.0)).collect();
        let profile_b: Vec<f64> = (0..32).map(|_| rng.gen_range(0.25..1.0)).collect();
        let mut e = EdgeField::zeros(g);
        for idx in 0..g.vol() {
            let x1 = g.coords(idx)[0];
            e.component_mut(0)[idx] = profile_a[x1];
            e.component_mut(1)[idx] = profile_b[x1];
        }
        let a = CoefficientField::new(e, 0.25);
        let config = SolverConfig::default();
        let set = compute_correctors(&a, &config).unwrap();
        let harm = 32.0 / profile_a.iter().map(|v| 1.0 / v).sum::<f64>();
        let arith = profile_b.iter().sum::<f64>() / 32.0;
        assert!((set.abar_box.get(0, 0) - harm).abs() <= 10.0 * config.tol * harm);
        assert!((set.abar_box.get(1, 1) - arith).abs() <= 10.0 * config.tol * arith);
        assert!(set.abar_box.get(0, 1).abs() <= 1e-9);
        assert!(set.abar_box.get(1, 0).abs() <= 1e-9);
    }

    /// The flux identity and conservation hold at solver tolerance, and phi,
    /// sigma are mean-zero; fuzz over dimensions and seeds.
    #[test]
    fn corrector_invariants_fuzz() {
        let config = SolverConfig::default();
        for (d, n, seed) in [(1usize, 32usize, 1u64), (2, 16, 2), (3, 8, 3), (2, 32, 4)] {
            let g = grid(d, n);
            let a = sample_a(&g, 0.25, seed);
            let set = compute_correctors(&a, &config).unwrap();
            for i in 0..d {
                assert!(set.phi[i].mean().abs() < 1e-12);
                assert!(set.residuals.flux_divergence[i] <= config.tol, "{d} {n} {seed}");
                assert!(
                    set.residuals.flux_identity[i] <= 10.0 * config.tol,
                    "flux identity {} in d={d}",
                    set.residuals.flux_identity[i]
                );
                for m in gradient_fwd(&set.phi[i]).component_means() {
                    assert!(m.abs() < 1e-13);
                }
                // q_i = a(e_i + grad phi_i) holds pointwise by construction
                let gphi = gradient_fwd(&set.phi[i]);
                for j in 0..d {
                    for (idx, qv) in set.q[i].component(j).iter().enumerate() {
                        let e = if i == j { 1.0 } else { 0.0 };
                        let want = a.component(j)[idx] * (e + gphi.component(j)[idx]);
                        assert!((qv - want).abs() < 1e-14);
                    }
                }
                // box-mean of q - abar e is exactly zero by construction
                for (j, m) in set.q[i].component_means().iter().enumerate() {
                    assert!((m - set.abar_box.get(j, i)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn massive_constant_collapses() {
        let g = grid(2, 8);
        let a = CoefficientField::constant(g, 0.6);
        let set = compute_massive_correctors(&a, 16.0, &SolverConfig::default()).unwrap();
        for i in 0..2 {
            assert!(set.phi[i].lp_norm(f64::INFINITY).unwrap() < 1e-12);
            assert!(set.sigma[i].lp_norm(f64::INFINITY).unwrap() < 1e-12);
            assert!(set.psi[i].lp_norm(f64::INFINITY).unwrap() < 1e-12);
            assert!((set.abar_t.get(i, i) - 0.6).abs() < 1e-13);
        }
    }

    /// The massive flux identity holds at solver tolerance on fuzzed samples.
    #[test]
    fn massive_flux_identity_fuzz() {
        let config = SolverConfig::default();
        for (d, n, t, seed) in [(1usize, 32usize, 4.0, 11u64), (2, 16, 16.0, 12), (3, 8, 64.0, 13)]
        {
            let g = grid(d, n);
            let a = sample_a(&g, 0.25, seed);
            let set = compute_massive_correctors(&a, t, &config).unwrap();
            for i in 0..d {
                assert!(
                    set.residuals.flux_identity[i] <= 10.0 * config.tol,
                    "d={d}: {}",
                    set.residuals.flux_identity[i]
                );
                assert!(set.residuals.corrector_eq[i] <= config.tol);
            }
        }
    }

    /// grad phi_T approaches grad phi monotonically as T grows.
    #[test]
    fn massive_converges_to_massless() {
        let g = grid(2, 16);
        let a = sample_a(&g, 0.25, 21);
        let config = SolverConfig::default();
        let massless = compute_correctors(&a, &config).unwrap();
        let mut prev = f64::INFINITY;
        for t in [4.0, 16.0, 64.0] {
            let massive = compute_massive_correctors(&a, t, &config).unwrap();
            let mut diff2 = 0.0;
            for i in 0..2 {
                let gm = gradient_fwd(&massive.phi[i]);
                let g0 = gradient_fwd(&massless.phi[i]);
                for (x, y) in gm.values().iter().zip(g0.values()) {
                    diff2 += (x - y) * (x - y);
                }
            }
            let diff = diff2.sqrt();
            assert!(diff < prev, "T={t}: {diff} !< {prev}");
            prev = diff;
        }
    }

    #[test]
    fn homogenized_estimate_constant_exact() {
        let g = grid(2, 8);
        let a = CoefficientField::constant(g, 0.5);
        let config = SolverConfig::default();
        let sets: Vec<CorrectorSet> =
            (0..3).map(|_| compute_correctors(&a, &config).unwrap()).collect();
        let est = homogenized_estimate(&sets).unwrap();
        assert!((est.abar.get(0, 0) - 0.5).abs() < 1e-12);
        assert!(est.ci_half_width.get(0, 0) < 1e-12);
        assert!(est.voigt_reuss_pass);
    }

    /// d=1 ensemble estimate equals the averaged per-sample harmonic means.
    #[test]
    fn homogenized_estimate_d1_closed_form() {
        let g = grid(1, 64);
        let config = SolverConfig::default();
        let sets: Vec<CorrectorSet> = (0..8)
            .map(|s| {
                let a = sample_a(&g, 0.25, 100 + s);
                compute_correctors(&a, &config).unwrap()
            })
            .collect();
        let est = homogenized_estimate(&sets).unwrap();
        let want: f64 = sets.iter().map(|s| s.a_harmonic_mean).sum::<f64>() / 8.0;
        assert!((est.abar.get(0, 0) - want).abs() < 1e-10);
        assert!(est.voigt_reuss_pass);
    }

    #[test]
    fn increment_moment_zero_lag() {
        let g = grid(2, 16);
        let a = sample_a(&g, 0.25, 31);
        let config = SolverConfig::default();
        let sets: Vec<CorrectorSet> = (0..8)
            .map(|s| {
                let a2 = if s == 0 { a.clone() } else { sample_a(&g, 0.25, 31 + s) };
                compute_correctors(&a2, &config).unwrap()
            })
            .collect();
        let lm = corrector_increment_moments(&sets, &[0, 2], 1, 5).unwrap();
        assert_eq!(lm[0].phi.value, 0.0);
        assert!(lm[1].phi.value > 0.0);
        // lag beyond n/4 errors
        assert!(corrector_increment_moments(&sets, &[8], 1, 5).is_err());
    }

    /// Malliavin representation against central differences: single-edge
    /// perturbation at eps = 1e-3 agrees to 1e-5, and the relative error
    /// decays quadratically in eps.
    #[test]
    fn sensitivity_single_edge() {
        let g = grid(2, 8);
        let a = sample_a(&g, 0.25, 41);
        let mut g_test = EdgeField::zeros(g);
        let mut rng = crate::seed::rng_for(42);
        use rand::Rng;
        for v in g_test.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut delta = EdgeField::zeros(g);
        delta.component_mut(0)[5] = 0.5;
        let config = SolverConfig::default();
        let report = corrector_sensitivity_check(
            &a,
            0,
            &g_test,
            &delta,
            &[1e-2, 1e-3, 1e-4],
            &config,
        )
        .unwrap();
        let at_1e3 = report.rel_errors.iter().find(|(e, _)| (*e - 1e-3).abs() < 1e-12).unwrap();
        assert!(at_1e3.1 <= 1e-5, "rel err {} at eps=1e-3", at_1e3.1);
        assert!(
            (report.slope - 2.0).abs() <= 0.2,
            "slope {} errors {:?}",
            report.slope,
            report.rel_errors
        );
        let fat_1e3 =
            report.flux_rel_errors.iter().find(|(e, _)| (*e - 1e-3).abs() < 1e-12).unwrap();
        assert!(fat_1e3.1 <= 1e-5, "flux rel err {}", fat_1e3.1);
        assert!((report.flux_slope - 2.0).abs() <= 0.2, "flux slope {}", report.flux_slope);
    }

    #[test]
    fn sensitivity_zero_perturbation() {
        let g = grid(1, 16);
        let a = sample_a(&g, 0.5, 43);
        let mut g_test = EdgeField::zeros(g);
        g_test.component_mut(0)[3] = 1.0;
        let delta = EdgeField::zeros(g);
        let config = SolverConfig::default();
        let report =
            corrector_sensitivity_check(&a, 0, &g_test, &delta, &[1e-3], &config).unwrap();
        // both sides vanish identically; relative errors are 0/0 guarded
        assert!(report.rel_errors[0].1 < 1e10); // no blowup; derivative is 0
    }

    #[test]
    fn sensitivity_rejects_ellipticity_break() {
        let g = grid(1, 8);
        let a = sample_a(&g, 0.25, 44);
        let mut delta = EdgeField::zeros(g);
        delta.component_mut(0).fill(-1.0);
        let err = perturbed_coefficient(&a, &delta, 2.0);
        assert!(matches!(err, Err(ShlError::PerturbationBreaksEllipticity { .. })));
    }
}
