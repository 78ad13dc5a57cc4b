//! Monte-Carlo estimation: ensemble moments in the `<|X|^{2r}>^{1/r}`
//! convention, mixed space-probability norms, log-log rate fits, and the
//! spectral-gap / annealed-operator-norm probes.

use crate::correctors;
use crate::error::{Result, ShlError};
use crate::field::{EdgeField, ScalarField};
#[cfg(test)]
use crate::field::FieldNorms;
use crate::grid::PeriodicGrid;
use crate::randomfield::{
    coefficient_from_gaussian, sample_gaussian_with, CoefficientField, CoefficientMap,
    CovarianceSpec, DiscreteSpectrum,
};
use crate::seed;
use crate::solver::{self, MassiveProblem, SolverConfig, SpectralSolver};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ensemble description: grid, covariance, map, solver settings and the
/// deterministic per-sample seed splitter.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_samples: usize,
    pub base_seed: u64,
    pub grid: PeriodicGrid,
    pub cov: CovarianceSpec,
    pub map: CoefficientMap,
    pub solver: SolverConfig,
}

impl EnsembleConfig {
    pub fn sample_seed(&self, index: usize) -> u64 {
        seed::split(self.base_seed, index as u64)
    }

    pub fn sample_coefficient(
        &self,
        spectrum: &DiscreteSpectrum,
        index: usize,
    ) -> Result<CoefficientField> {
        let g = sample_gaussian_with(&self.grid, spectrum, self.sample_seed(index), true)?;
        coefficient_from_gaussian(&g.fields, &self.map)
    }
}

/// `<|X|^{2r}>^{1/r}` estimate with a percentile-bootstrap 90% interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub r: usize,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    /// Raw `<|X|^{2r}>` plug-in moment.
    pub raw: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

const BOOTSTRAP_RESAMPLES: usize = 500;

/// Plug-in estimator of `<|X|^{2r}>^{1/r}` with a seeded percentile bootstrap.
pub fn moment_estimate(samples: &[f64], r: usize, seed_val: u64) -> Result<MomentEstimate> {
    let n = samples.len();
    if n < 8 {
        return Err(ShlError::InvalidArgument(format!(
            "need at least 8 samples for a bootstrap interval, got {n}"
        )));
    }
    if r == 0 {
        return Err(ShlError::InvalidArgument("moment order r must be >= 1".into()));
    }
    let powers: Vec<f64> = samples.iter().map(|x| x.abs().powi(2 * r as i32)).collect();
    moment_estimate_from_powers(&powers, r, seed_val)
}

/// Same estimator when the caller already holds per-sample values of
/// `|X|^{2r}` (e.g. spatially averaged increments).
pub fn moment_estimate_from_powers(
    powers: &[f64],
    r: usize,
    seed_val: u64,
) -> Result<MomentEstimate> {
    let n = powers.len();
    if n == 0 {
        return Err(ShlError::InvalidArgument("no samples".into()));
    }
    let raw = powers.iter().sum::<f64>() / n as f64;
    let value = raw.powf(1.0 / r as f64);

    let mut rng = seed::rng_for(seed::split(seed_val, 0x626f_6f74 /* "boot" */));
    let mut stats = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += powers[rng.gen_range(0..n)];
        }
        stats.push((acc / n as f64).powf(1.0 / r as f64));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = stats[(0.05 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    let hi = stats[(0.95 * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize];
    let warning = if n < 4usize.saturating_pow(r as u32).saturating_mul(4) {
        Some(format!("only {n} samples for moment order r={r}; heavy tails may dominate"))
    } else {
        None
    };
    Ok(MomentEstimate {
        r,
        value,
        ci_low: lo.min(value),
        ci_high: hi.max(value),
        n,
        raw,
        warning,
    })
}

/// Measure used for the spatial integral in mixed norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// `h^d` cell weights (the lattice Lebesgue integral).
    Lebesgue,
    /// Unit-normalized torus measure (averages); makes the `p`-monotonicity
    /// of power means an exact inequality.
    Normalized,
}

/// Mixed norm `(int <|h|^r>^{p/r})^{1/p}` where `<.>` is the pointwise
/// sample average. `fields` holds one flat magnitude field per sample.
pub fn mixed_norm(
    fields: &[&[f64]],
    grid: &PeriodicGrid,
    p: f64,
    r: f64,
    measure: Measure,
) -> Result<f64> {
    if fields.is_empty() {
        return Err(ShlError::InvalidArgument("no sample fields".into()));
    }
    let len = fields[0].len();
    if fields.iter().any(|f| f.len() != len) {
        return Err(ShlError::GridMismatch("sample fields of different sizes".into()));
    }
    if p < 1.0 || r < 1.0 {
        return Err(ShlError::InvalidArgument("exponents must be >= 1".into()));
    }
    let n_samples = fields.len() as f64;
    let mut acc = 0.0;
    for x in 0..len {
        let mut m = 0.0;
        for f in fields {
            m += f[x].abs().powf(r);
        }
        m /= n_samples;
        acc += m.powf(p / r);
    }
    let weight = match measure {
        Measure::Lebesgue => grid.cell_volume(),
        Measure::Normalized => 1.0 / len as f64,
    };
    Ok((weight * acc).powf(1.0 / p))
}

/// Local variant: replaces `|h|(x)` by the ball-1 local `L^q` average
/// `(avg_{B_1(x)} |h|^q)^{1/q}` per sample before the mixed norm.
pub fn mixed_norm_local(
    fields: &[&[f64]],
    grid: &PeriodicGrid,
    p: f64,
    r: f64,
    q: f64,
    measure: Measure,
) -> Result<f64> {
    if grid.spacing() >= 1.0 {
        return Err(ShlError::InvalidArgument(
            "local exponent q requires h < 1 so that the unit ball is resolved".into(),
        ));
    }
    let filtered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| ball_filter_q(grid, f, q))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = filtered.iter().map(|f| f.as_slice()).collect();
    mixed_norm(&refs, grid, p, r, measure)
}

fn ball_filter_q(grid: &PeriodicGrid, f: &[f64], q: f64) -> Result<Vec<f64>> {
    if f.len() != grid.vol() {
        return Err(ShlError::GridMismatch("field length".into()));
    }
    let powered: Vec<f64> = f.iter().map(|v| v.abs().powf(q)).collect();
    let filtered = ball_filter_unit(grid, &powered);
    Ok(filtered.into_iter().map(|v| v.powf(1.0 / q)).collect())
}

/// Concatenated magnitude field `|(u/sqrt(T), grad u)|(x)` used by the
/// operator-norm probes.
pub fn solution_magnitude(u: &ScalarField, grad: &EdgeField, t: f64) -> Vec<f64> {
    let grid = u.grid();
    let inv_t = if t.is_infinite() { 0.0 } else { 1.0 / t };
    let vol = grid.vol();
    let mut out = vec![0.0; vol];
    for (o, uv) in out.iter_mut().zip(u.values()) {
        *o = inv_t * uv * uv;
    }
    for j in 0..grid.dim() {
        let c = grad.component(j);
        for (o, v) in out.iter_mut().zip(c) {
            *o += v * v;
        }
    }
    for o in &mut out {
        *o = o.sqrt();
    }
    out
}

/// Same for the data side `|(g/sqrt(T), f)|(x)`.
pub fn data_magnitude(g: &ScalarField, f: &EdgeField, t: f64) -> Vec<f64> {
    let grid = g.grid();
    let inv_t = if t.is_infinite() { 0.0 } else { 1.0 / t };
    let vol = grid.vol();
    let mut out = vec![0.0; vol];
    for (o, gv) in out.iter_mut().zip(g.values()) {
        *o = inv_t * gv * gv;
    }
    for j in 0..grid.dim() {
        let c = f.component(j);
        for (o, v) in out.iter_mut().zip(c) {
            *o += v * v;
        }
    }
    for o in &mut out {
        *o = o.sqrt();
    }
    out
}

/// Log-log rate fit with an optional `eps mu_d(1/eps)` model for d = 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// True when the log-corrected one-parameter law fits at least as well
    /// as the pure power law (d = 2 only).
    pub with_log_correction: bool,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

/// Fits `ln(value)` against `ln(eps)`; for d = 2 also compares the pinned
/// one-parameter laws `C eps` and `C eps mu_2(1/eps)` by residual.
pub fn rate_fit(pairs: &[(f64, f64)], d: usize) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(ShlError::InvalidArgument("need at least 3 (eps, value) pairs".into()));
    }
    for w in pairs.windows(2) {
        if w[1].0 >= w[0].0 {
            return Err(ShlError::InvalidArgument("eps must be strictly decreasing".into()));
        }
    }
    if pairs.iter().any(|(e, v)| *e <= 0.0 || *v <= 0.0) {
        return Err(ShlError::InvalidArgument("eps and values must be positive".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, v)| v.ln()).collect();
    let (slope, intercept, r2) = least_squares(&xs, &ys);

    let mut with_log_correction = false;
    if d == 2 {
        let xs_log: Vec<f64> = pairs
            .iter()
            .map(|(e, _)| (e * correctors::mu_d(1.0 / e, 2)).ln())
            .collect();
        let pin = |xabs: &[f64]| -> f64 {
            let c = xabs.iter().zip(&ys).map(|(x, y)| y - x).sum::<f64>() / xabs.len() as f64;
            xabs.iter().zip(&ys).map(|(x, y)| (y - (x + c)).powi(2)).sum()
        };
        with_log_correction = pin(&xs_log) <= pin(&xs);
    }
    Ok(RateFit { exponent: slope, intercept, r_squared: r2, with_log_correction })
}

/// Spectral-gap probe output: variance side, carré-du-champs side, ratio.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralGapProbe {
    pub var_estimate: MomentEstimate,
    pub rhs_estimate: MomentEstimate,
    pub ratio: f64,
}

/// Monte-Carlo check of the variance bound: LHS is `Var F`, RHS the
/// carré-du-champs `< int (avg_{B_1(x)} |dF/da|)^2 dx >`, both with
/// bootstrap intervals. `evaluate` returns `(F, dF/da)` per sample.
pub fn spectral_gap_probe(
    config: &EnsembleConfig,
    mut evaluate: impl FnMut(usize, &CoefficientField) -> Result<(f64, EdgeField)>,
) -> Result<SpectralGapProbe> {
    let spectrum = DiscreteSpectrum::new(&config.grid, &config.cov);
    let grid = config.grid;
    let mut f_vals = Vec::with_capacity(config.n_samples);
    let mut rhs_vals = Vec::with_capacity(config.n_samples);
    for s in 0..config.n_samples {
        let a = config.sample_coefficient(&spectrum, s)?;
        let (f, deriv) = evaluate(s, &a)?;
        f_vals.push(f);
        // |dF/da|(x): euclidean magnitude over edge directions at the base site
        let mag = deriv.magnitude();
        let filtered = ball_filter_unit(&grid, mag.values());
        let rhs: f64 = grid.cell_volume() * filtered.iter().map(|v| v * v).sum::<f64>();
        rhs_vals.push(rhs);
    }
    let mean = f_vals.iter().sum::<f64>() / f_vals.len() as f64;
    let centered: Vec<f64> = f_vals.iter().map(|f| f - mean).collect();
    // Var F = <(F - <F>)^2>: order r=1 moment of the centered samples
    let var_estimate = moment_estimate(&centered, 1, seed::split(config.base_seed, 0x7670))?;
    let rhs_sqrt: Vec<f64> = rhs_vals.iter().map(|v| v.sqrt()).collect();
    let rhs_estimate = moment_estimate(&rhs_sqrt, 1, seed::split(config.base_seed, 0x7671))?;
    let ratio = if rhs_estimate.value > 0.0 {
        var_estimate.value / rhs_estimate.value
    } else {
        f64::INFINITY
    };
    Ok(SpectralGapProbe { var_estimate, rhs_estimate, ratio })
}

/// `avg_{B_1(x)} |v|` over the closed l-infinity unit ball (the 3^d-site box
/// at h = 1, larger stencils for finer grids).
pub fn ball_filter_unit(grid: &PeriodicGrid, v: &[f64]) -> Vec<f64> {
    let steps = (1.0 / grid.spacing()).floor().max(1.0) as isize;
    let d = grid.dim();
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for base in &offsets {
            for s in -steps..=steps {
                let mut b = base.clone();
                b.push(s);
                next.push(b);
            }
        }
        offsets = next;
    }
    let mut out = vec![0.0; v.len()];
    for (x, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for off in &offsets {
            let mut idx = x;
            for (axis, &s) in off.iter().enumerate() {
                idx = grid.shift(idx, axis, s);
            }
            acc += v[idx].abs();
        }
        *o = acc / offsets.len() as f64;
    }
    out
}

/// One row of the annealed operator-norm probe.
#[derive(Debug, Clone, Serialize)]
pub struct CzProbeRow {
    pub t: f64,
    pub rhs_label: String,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CzProbeReport {
    pub p: f64,
    pub r_prime: f64,
    pub r: f64,
    pub rows: Vec<CzProbeRow>,
    /// Max ratio per T (empirical lower bound for the operator norm).
    pub lower_bounds: Vec<(f64, f64)>,
    pub failures: usize,
}

/// RHS generators for the probe.
#[derive(Debug, Clone)]
pub enum RhsFamily {
    /// Deterministic single Fourier mode on f (g = 0).
    ModeF { axis: usize, mode: usize },
    /// Deterministic single Fourier mode on g (f = 0).
    ModeG { axis: usize, mode: usize },
    /// Per-sample iid standard normal edge field f (g = 0).
    WhiteF,
    /// Coefficient-correlated f = a e_axis (g = 0).
    CoefficientF { axis: usize },
}

impl RhsFamily {
    pub fn label(&self) -> String {
        match self {
            RhsFamily::ModeF { axis, mode } => format!("mode_f[{axis},{mode}]"),
            RhsFamily::ModeG { axis, mode } => format!("mode_g[{axis},{mode}]"),
            RhsFamily::WhiteF => "white_f".into(),
            RhsFamily::CoefficientF { axis } => format!("coeff_f[{axis}]"),
        }
    }

    fn realize(
        &self,
        grid: &PeriodicGrid,
        a: &CoefficientField,
        sample_seed: u64,
    ) -> (ScalarField, EdgeField) {
        match self {
            RhsFamily::ModeF { axis, mode } => {
                let mut f = EdgeField::zeros(*grid);
                let n = grid.points_per_side() as f64;
                for idx in 0..grid.vol() {
                    let x = grid.coords(idx)[*axis] as f64;
                    f.component_mut(*axis)[idx] =
                        (2.0 * std::f64::consts::PI * *mode as f64 * x / n).cos();
                }
                (ScalarField::zeros(*grid), f)
            }
            RhsFamily::ModeG { axis, mode } => {
                let n = grid.points_per_side() as f64;
                let g = ScalarField::from_fn(*grid, |c| {
                    (2.0 * std::f64::consts::PI * *mode as f64 * c[*axis] as f64 / n).sin()
                });
                (g, EdgeField::zeros(*grid))
            }
            RhsFamily::WhiteF => {
                let mut rng = seed::rng_for(seed::split(sample_seed, 0x7768));
                let mut f = EdgeField::zeros(*grid);
                for v in f.values_mut() {
                    let x: f64 = rng.sample(rand_distr::StandardNormal);
                    *v = x;
                }
                (ScalarField::zeros(*grid), f)
            }
            RhsFamily::CoefficientF { axis } => {
                let mut f = EdgeField::zeros(*grid);
                f.component_mut(*axis).copy_from_slice(a.component(*axis));
                (ScalarField::zeros(*grid), f)
            }
        }
    }
}

/// Empirical lower bounds for the smallest constant in
/// `|| (u/sqrt(T), grad u) ||_{p,r'} <= C || (g/sqrt(T), f) ||_{p,r}`
/// over a finite RHS family. Lower bounds only: a finite family cannot
/// certify the supremum.
#[allow(clippy::too_many_arguments)]
pub fn cz_constant_probe(
    config: &EnsembleConfig,
    p: f64,
    r_prime: f64,
    r: f64,
    t_list: &[f64],
    rhs_family: &[RhsFamily],
    constant_a: Option<Tensor>,
) -> Result<CzProbeReport> {
    if r_prime > r {
        return Err(ShlError::InvalidArgument("need r' <= r".into()));
    }
    let grid = config.grid;
    let spectrum = DiscreteSpectrum::new(&grid, &config.cov);
    let spectral = SpectralSolver::new(&grid);
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for &t in t_list {
        for rhs in rhs_family {
            let mut sol_mags: Vec<Vec<f64>> = Vec::new();
            let mut data_mags: Vec<Vec<f64>> = Vec::new();
            let deterministic = constant_a.is_some()
                && !matches!(rhs, RhsFamily::WhiteF | RhsFamily::CoefficientF { .. });
            let n_samples = if deterministic { 1 } else { config.n_samples };
            for s in 0..n_samples {
                let sample_seed = config.sample_seed(s);
                let a = match &constant_a {
                    Some(abar) => CoefficientField::constant(grid, abar.get(0, 0)),
                    None => config.sample_coefficient(&spectrum, s)?,
                };
                let (g, f) = rhs.realize(&grid, &a, sample_seed);
                let solved = match &constant_a {
                    Some(abar) => solver::solve_constant_with(&spectral, abar, t, &g, &f),
                    None => {
                        let problem = MassiveProblem::new(a, t, g.clone(), f.clone())?;
                        solver::solve_variable_with(&spectral, &problem, &config.solver)
                    }
                };
                match solved {
                    Ok(sol) => {
                        sol_mags.push(solution_magnitude(&sol.u, &sol.grad_u, t));
                        data_mags.push(data_magnitude(&g, &f, t));
                    }
                    Err(_) => failures += 1,
                }
            }
            if sol_mags.is_empty() {
                return Err(ShlError::AllSamplesFailed(format!(
                    "cz probe T={t} rhs={}",
                    rhs.label()
                )));
            }
            let sol_refs: Vec<&[f64]> = sol_mags.iter().map(|v| v.as_slice()).collect();
            let data_refs: Vec<&[f64]> = data_mags.iter().map(|v| v.as_slice()).collect();
            let lhs = mixed_norm(&sol_refs, &grid, p, r_prime, Measure::Lebesgue)?;
            let rhs_norm = mixed_norm(&data_refs, &grid, p, r, Measure::Lebesgue)?;
            rows.push(CzProbeRow {
                t,
                rhs_label: rhs.label(),
                lhs_norm: lhs,
                rhs_norm,
                ratio: lhs / rhs_norm,
            });
        }
    }
    let lower_bounds = t_list
        .iter()
        .map(|&t| {
            let m = rows
                .iter()
                .filter(|row| row.t == t)
                .map(|row| row.ratio)
                .fold(0.0f64, f64::max);
            (t, m)
        })
        .collect();
    Ok(CzProbeReport { p, r_prime, r, rows, lower_bounds, failures })
}
