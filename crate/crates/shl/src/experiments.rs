//! Registered experiment pipelines: deterministic per-sample seeding,
//! sample-parallel execution, CSV rows plus a JSON summary per experiment.

use crate::config::ExperimentConfig;
use crate::correctors::{
    compute_correctors_with, corrector_sensitivity_check, homogenized_estimate, mu_d,
    CorrectorSet,
};
use crate::ensemble::{
    cz_constant_probe, moment_estimate, moment_estimate_from_powers, rate_fit,
    spectral_gap_probe, EnsembleConfig, RhsFamily,
};
use crate::error::{Result, ShlError};
use crate::field::{EdgeField, ScalarField};
use crate::grid::{GridBox, PeriodicGrid};
use crate::homogenization::{
    fluctuation_observables, fluctuation_sensitivity_check, massive_splitting, MacroProfile,
};
use crate::io::fmt_f64;
use crate::randomfield::{
    ellipticity_check, sample_gaussian_with, DiscreteSpectrum,
};
use crate::seed;
use crate::solver::{solve_variable_with, MassiveProblem, SolverConfig, SpectralSolver};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde_json::json;

/// Output of one experiment run: a CSV table (one row per sample or
/// per configuration point) plus a JSON summary.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub name: String,
    pub csv_header: Vec<String>,
    pub csv_rows: Vec<Vec<String>>,
    pub summary: serde_json::Value,
    /// Per-sample failures recorded, not fatal.
    pub failures: Vec<(usize, String)>,
}

pub fn ensemble_config(config: &ExperimentConfig) -> Result<EnsembleConfig> {
    Ok(EnsembleConfig {
        n_samples: config.ensemble.n_samples,
        base_seed: config.ensemble.base_seed,
        grid: config.grid()?,
        cov: config.covariance()?,
        map: config.coefficient_map()?,
        solver: config.solver_config()?,
    })
}

/// Dispatches to the named experiment.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.experiment.name.as_str() {
        "sample" => run_sample(config),
        "correctors" => run_correctors(config),
        "massive-correctors" => run_massive_correctors(config),
        "oscillation" => run_oscillation(config),
        "fluctuation" => run_fluctuation(config),
        "splitting" => run_splitting(config),
        "rates" => run_rates(config),
        "increments" => run_increments(config),
        "sg-probe" => run_sg_probe(config),
        "cz-probe" => run_cz_probe(config),
        other => Err(ShlError::Config(format!("unknown experiment '{other}'"))),
    }
}

/// Runs `per_sample` for every index in parallel, keeping per-sample errors.
fn collect_samples<T: Send>(
    n: usize,
    per_sample: impl Fn(usize) -> Result<T> + Sync,
) -> (Vec<(usize, T)>, Vec<(usize, String)>) {
    let results: Vec<(usize, std::result::Result<T, String>)> = (0..n)
        .into_par_iter()
        .map(|s| (s, per_sample(s).map_err(|e| e.to_string())))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in results {
        match r {
            Ok(v) => ok.push((s, v)),
            Err(e) => failures.push((s, e)),
        }
    }
    (ok, failures)
}

fn require_any<T>(ok: &[(usize, T)], what: &str) -> Result<()> {
    if ok.is_empty() {
        return Err(ShlError::AllSamplesFailed(what.into()));
    }
    Ok(())
}

fn run_sample(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let (ok, failures) = collect_samples(ec.n_samples, |s| {
        let a = ec.sample_coefficient(&spectrum, s)?;
        let rep = ellipticity_check(&a);
        Ok((ec.sample_seed(s), rep.min, rep.max, rep.pass, a.mean(), a.harmonic_mean()))
    });
    require_any(&ok, "sample")?;
    let header =
        vec!["sample".into(), "seed".into(), "a_min".into(), "a_max".into(), "elliptic".into(), "a_mean".into(), "a_harmonic".into()];
    let rows = ok
        .iter()
        .map(|(s, (seed, min, max, pass, mean, harm))| {
            vec![
                s.to_string(),
                seed.to_string(),
                fmt_f64(*min),
                fmt_f64(*max),
                pass.to_string(),
                fmt_f64(*mean),
                fmt_f64(*harm),
            ]
        })
        .collect();
    let all_pass = ok.iter().all(|(_, r)| r.3);
    Ok(ExperimentOutput {
        name: "sample".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({
            "n_samples": ok.len(),
            "all_elliptic": all_pass,
            "normalization": spectrum.normalization,
        }),
        failures,
    })
}

fn corrector_sets(
    ec: &EnsembleConfig,
    n: usize,
) -> (Vec<(usize, CorrectorSet)>, Vec<(usize, String)>) {
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    collect_samples(n, |s| {
        let spectral = SpectralSolver::new(&ec.grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        compute_correctors_with(&spectral, &a, &ec.solver)
    })
}

fn run_correctors(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let (ok, failures) = corrector_sets(&ec, ec.n_samples);
    require_any(&ok, "correctors")?;
    let d = ec.grid.dim();
    let mut header = vec!["sample".into(), "seed".into()];
    for i in 0..d {
        for j in 0..d {
            header.push(format!("abar_{i}{j}"));
        }
    }
    header.push("max_flux_divergence".into());
    header.push("max_flux_identity".into());
    let rows = ok
        .iter()
        .map(|(s, set)| {
            let mut row = vec![s.to_string(), ec.sample_seed(*s).to_string()];
            for i in 0..d {
                for j in 0..d {
                    row.push(fmt_f64(set.abar_box.get(i, j)));
                }
            }
            let maxd = set.residuals.flux_divergence.iter().cloned().fold(0.0, f64::max);
            let maxi = set.residuals.flux_identity.iter().cloned().fold(0.0, f64::max);
            row.push(fmt_f64(maxd));
            row.push(fmt_f64(maxi));
            row
        })
        .collect();
    let sets: Vec<CorrectorSet> = ok.iter().map(|(_, s)| s.clone()).collect();
    let est = homogenized_estimate(&sets)?;
    Ok(ExperimentOutput {
        name: "correctors".into(),
        csv_header: header,
        csv_rows: rows,
        summary: serde_json::to_value(&est).map_err(|e| ShlError::Format(e.to_string()))?,
        failures,
    })
}

fn run_massive_correctors(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let t = config
        .experiment
        .t
        .ok_or_else(|| ShlError::Config("massive-correctors needs experiment.T".into()))?;
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let (ok, failures) = collect_samples(ec.n_samples, |s| {
        let spectral = SpectralSolver::new(&ec.grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = crate::correctors::compute_massive_correctors_with(&spectral, &a, t, &ec.solver)?;
        let maxi = set.residuals.flux_identity.iter().cloned().fold(0.0, f64::max);
        Ok((set.abar_t, maxi))
    });
    require_any(&ok, "massive-correctors")?;
    let d = ec.grid.dim();
    let mut header = vec!["sample".into(), "seed".into()];
    for i in 0..d {
        for j in 0..d {
            header.push(format!("abar_t_{i}{j}"));
        }
    }
    header.push("max_flux_identity".into());
    let rows = ok
        .iter()
        .map(|(s, (abar, maxi))| {
            let mut row = vec![s.to_string(), ec.sample_seed(*s).to_string()];
            for i in 0..d {
                for j in 0..d {
                    row.push(fmt_f64(abar.get(i, j)));
                }
            }
            row.push(fmt_f64(*maxi));
            row
        })
        .collect();
    let worst = ok.iter().map(|(_, (_, m))| *m).fold(0.0, f64::max);
    Ok(ExperimentOutput {
        name: "massive-correctors".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({ "T": t, "worst_flux_identity": worst, "n_samples": ok.len() }),
        failures,
    })
}

/// Diagonal pilot estimate of the homogenized tensor, deterministic in the
/// base seed; used as the fixed deterministic input of the fluctuation and
/// oscillation machinery.
pub fn pilot_abar(ec: &EnsembleConfig, n_pilot: usize) -> Result<Tensor> {
    let pilot = EnsembleConfig {
        n_samples: n_pilot,
        base_seed: seed::split(ec.base_seed, 0xab4a),
        ..ec.clone()
    };
    let (ok, _failures) = corrector_sets(&pilot, n_pilot);
    require_any(&ok, "pilot abar")?;
    let sets: Vec<CorrectorSet> = ok.into_iter().map(|(_, s)| s).collect();
    let est = homogenized_estimate(&sets)?;
    let d = est.abar.d;
    let diag: Vec<f64> = (0..d).map(|i| est.abar.get(i, i)).collect();
    Ok(Tensor::diagonal(d, &diag))
}

fn run_oscillation(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let eps = 1.0 / ec.grid.side_length();
    let abar = pilot_abar(&ec, 16)?;
    let p = config.experiment.p.unwrap_or(2.0);
    let profile = config.macro_profile(eps)?;
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let (ok, failures) = collect_samples(ec.n_samples, |s| {
        let spectral = SpectralSolver::new(&ec.grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = compute_correctors_with(&spectral, &a, &ec.solver)?;
        let rep = crate::homogenization::oscillation_error(&a, &set, &profile, p, &abar, &ec.solver)?;
        Ok(rep)
    });
    require_any(&ok, "oscillation")?;
    let header = vec![
        "sample".into(),
        "seed".into(),
        "eps".into(),
        "error_norm".into(),
        "residual_check".into(),
        "weighted_rhs_norm".into(),
        "grad_ubar_norm".into(),
    ];
    let rows = ok
        .iter()
        .map(|(s, r)| {
            vec![
                s.to_string(),
                ec.sample_seed(*s).to_string(),
                fmt_f64(eps),
                fmt_f64(r.error_norm),
                fmt_f64(r.residual_check),
                fmt_f64(r.weighted_rhs_norm),
                fmt_f64(r.grad_ubar_norm),
            ]
        })
        .collect();
    let mean_err = ok.iter().map(|(_, r)| r.error_norm).sum::<f64>() / ok.len() as f64;
    let worst_res = ok.iter().map(|(_, r)| r.residual_check).fold(0.0, f64::max);
    Ok(ExperimentOutput {
        name: "oscillation".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({
            "eps": eps,
            "p": p,
            "mean_error_norm": mean_err,
            "worst_residual": worst_res,
            "abar": crate::io::tensor_rows(&abar),
        }),
        failures,
    })
}

/// Mean relative oscillation error at one scale: grid with one macro period,
/// `n = 1/(eps h)` sites per side.
pub fn oscillation_mean_error(
    base: &EnsembleConfig,
    config: &ExperimentConfig,
    eps: f64,
    n_samples: usize,
    eps_index: u64,
) -> Result<f64> {
    let h = base.grid.spacing();
    let n_f = 1.0 / (eps * h);
    let n = n_f.round() as usize;
    if (n_f - n as f64).abs() > 1e-9 || !n.is_power_of_two() || n < 8 {
        return Err(ShlError::InvalidArgument(format!(
            "eps = {eps} needs a power-of-two grid, got n = {n_f}"
        )));
    }
    let grid = PeriodicGrid::new(base.grid.dim(), n, h)?;
    let ec = EnsembleConfig {
        grid,
        n_samples,
        base_seed: seed::split(base.base_seed, 0xe950 + eps_index),
        ..base.clone()
    };
    let abar = pilot_abar(&ec, 16)?;
    let profile = config.macro_profile(eps)?;
    let spectrum = DiscreteSpectrum::new(&grid, &ec.cov);
    let (ok, _) = collect_samples(n_samples, |s| {
        let spectral = SpectralSolver::new(&grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = compute_correctors_with(&spectral, &a, &ec.solver)?;
        let rep =
            crate::homogenization::oscillation_error(&a, &set, &profile, 2.0, &abar, &ec.solver)?;
        // normalize by the homogenized gradient so scales are comparable
        Ok(rep.error_norm / rep.grad_ubar_norm.max(1e-300))
    });
    require_any(&ok, "oscillation rate point")?;
    Ok(ok.iter().map(|(_, v)| *v).sum::<f64>() / ok.len() as f64)
}

fn run_rates(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let eps_list = config
        .experiment
        .eps_list
        .clone()
        .ok_or_else(|| ShlError::Config("rates needs experiment.eps_list".into()))?;
    let mut pairs = Vec::with_capacity(eps_list.len());
    for (i, &eps) in eps_list.iter().enumerate() {
        let v = oscillation_mean_error(&ec, config, eps, ec.n_samples, i as u64)?;
        pairs.push((eps, v));
    }
    let fit = rate_fit(&pairs, ec.grid.dim())?;
    let header = vec!["eps".into(), "mean_error".into()];
    let rows = pairs.iter().map(|(e, v)| vec![fmt_f64(*e), fmt_f64(*v)]).collect();
    Ok(ExperimentOutput {
        name: "rates".into(),
        csv_header: header,
        csv_rows: rows,
        summary: serde_json::to_value(&fit).map_err(|e| ShlError::Format(e.to_string()))?,
        failures: Vec::new(),
    })
}

fn run_fluctuation(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let eps = 1.0 / ec.grid.side_length();
    let abar = pilot_abar(&ec, 16)?;
    let profile = config.macro_profile(eps)?;
    let out = fluctuation_ensemble(&ec, &profile, &abar)?;
    Ok(out)
}

/// Shared fluctuation pipeline for one (grid, profile) point.
pub fn fluctuation_ensemble(
    ec: &EnsembleConfig,
    profile: &MacroProfile,
    abar: &Tensor,
) -> Result<ExperimentOutput> {
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let (ok, failures) = collect_samples(ec.n_samples, |s| {
        let spectral = SpectralSolver::new(&ec.grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = compute_correctors_with(&spectral, &a, &ec.solver)?;
        fluctuation_observables(&a, &set, profile, abar, &ec.solver)
    });
    require_any(&ok, "fluctuation")?;
    let header = vec![
        "sample".into(),
        "seed".into(),
        "eps".into(),
        "G".into(),
        "G_tilde".into(),
        "H".into(),
        "F_det".into(),
        "gread_defect".into(),
    ];
    let rows: Vec<Vec<String>> = ok
        .iter()
        .map(|(s, r)| {
            vec![
                s.to_string(),
                ec.sample_seed(*s).to_string(),
                fmt_f64(profile.epsilon),
                fmt_f64(r.g_obs),
                fmt_f64(r.g_tilde),
                fmt_f64(r.h_obs),
                fmt_f64(r.f_det),
                fmt_f64(r.gread_defect),
            ]
        })
        .collect();
    let g: Vec<f64> = ok.iter().map(|(_, r)| r.g_obs).collect();
    let gmt: Vec<f64> = ok.iter().map(|(_, r)| r.g_obs - r.g_tilde).collect();
    let variance = |v: &[f64]| -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1).max(1) as f64
    };
    Ok(ExperimentOutput {
        name: "fluctuation".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({
            "eps": profile.epsilon,
            "n": ok.len(),
            "var_g": variance(&g),
            "var_g_minus_gtilde": variance(&gmt),
            "abar": crate::io::tensor_rows(abar),
        }),
        failures,
    })
}

fn run_splitting(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let t = config
        .experiment
        .t
        .ok_or_else(|| ShlError::Config("splitting needs experiment.T".into()))?;
    let tau = config
        .experiment
        .tau
        .ok_or_else(|| ShlError::Config("splitting needs experiment.tau".into()))?;
    let eps = 1.0 / ec.grid.side_length();
    let profile = config.macro_profile(eps)?;
    let grid = ec.grid;
    let f = profile.realize_f(&grid);
    let gsc = ScalarField::from_fn(grid, |c| {
        (2.0 * std::f64::consts::PI * c[0] as f64 / grid.points_per_side() as f64).cos()
    });
    let spectrum = DiscreteSpectrum::new(&grid, &ec.cov);
    let (ok, failures) = collect_samples(ec.n_samples, |s| {
        let a = ec.sample_coefficient(&spectrum, s)?;
        let rep = massive_splitting(&a, t, tau, &gsc, &f, &ec.solver)?;
        Ok(rep.residuals)
    });
    require_any(&ok, "splitting")?;
    let header = vec![
        "sample".into(),
        "seed".into(),
        "telescope_u".into(),
        "telescope_grad".into(),
        "w_equation".into(),
    ];
    let rows = ok
        .iter()
        .map(|(s, r)| {
            vec![
                s.to_string(),
                ec.sample_seed(*s).to_string(),
                fmt_f64(r.telescope_u),
                fmt_f64(r.telescope_grad),
                fmt_f64(r.w_equation),
            ]
        })
        .collect();
    let worst_tel =
        ok.iter().map(|(_, r)| r.telescope_u.max(r.telescope_grad)).fold(0.0, f64::max);
    let worst_w = ok.iter().map(|(_, r)| r.w_equation).fold(0.0, f64::max);
    Ok(ExperimentOutput {
        name: "splitting".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({
            "T": t, "tau": tau,
            "worst_telescoping": worst_tel,
            "worst_w_equation": worst_w,
        }),
        failures,
    })
}

fn run_increments(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let lags = config
        .experiment
        .lags
        .clone()
        .unwrap_or_else(|| vec![4, 8, 16, 32]);
    let r_order = config.experiment.moment_order.unwrap_or(1);
    let moments = increment_moments_streaming(&ec, &lags, r_order)?;
    let header =
        vec!["lag".into(), "phi_moment".into(), "phi_ci_low".into(), "phi_ci_high".into(), "ext_moment".into()];
    let rows = moments
        .iter()
        .map(|(lag, phi, ext)| {
            vec![
                fmt_f64(*lag),
                fmt_f64(phi.value),
                fmt_f64(phi.ci_low),
                fmt_f64(phi.ci_high),
                fmt_f64(ext.value),
            ]
        })
        .collect();
    // log-linear fit of the phi moment against ln |x| (growth diagnostics)
    let pts: Vec<(f64, f64)> = moments
        .iter()
        .filter(|(l, m, _)| *l > 0.0 && m.value > 0.0)
        .map(|(l, m, _)| (l.ln(), m.value))
        .collect();
    let fit = fit_against_log(&pts);
    Ok(ExperimentOutput {
        name: "increments".into(),
        csv_header: header,
        csv_rows: rows,
        summary: json!({
            "r": r_order,
            "lags": lags,
            "log_slope": fit.0,
            "log_intercept": fit.1,
            "log_r_squared": fit.2,
            "mu_d_reference": lags
                .iter()
                .map(|&l| mu_d(l as f64 * ec.grid.spacing(), ec.grid.dim()).powi(2))
                .collect::<Vec<f64>>(),
        }),
        failures: Vec::new(),
    })
}

/// Streaming increment moments: per-sample spatially averaged powers
/// accumulated without keeping the corrector sets.
pub fn increment_moments_streaming(
    ec: &EnsembleConfig,
    lags: &[usize],
    r_order: usize,
) -> Result<Vec<(f64, crate::ensemble::MomentEstimate, crate::ensemble::MomentEstimate)>> {
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let n = ec.grid.points_per_side();
    for &lag in lags {
        if lag > n / 4 {
            return Err(ShlError::InvalidArgument(format!("lag {lag} exceeds n/4")));
        }
    }
    let (ok, _failures) = collect_samples(ec.n_samples, |s| {
        let spectral = SpectralSolver::new(&ec.grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = compute_correctors_with(&spectral, &a, &ec.solver)?;
        Ok(crate::correctors::increment_powers(&set, lags, r_order))
    });
    require_any(&ok, "increments")?;
    let mut out = Vec::with_capacity(lags.len());
    for (k, &lag) in lags.iter().enumerate() {
        let phi_powers: Vec<f64> = ok.iter().map(|(_, v)| v[k].0).collect();
        let ext_powers: Vec<f64> = ok.iter().map(|(_, v)| v[k].1).collect();
        let phi = moment_estimate_from_powers(
            &phi_powers,
            r_order,
            seed::split(ec.base_seed, 0x1a60 + lag as u64),
        )?;
        let ext = moment_estimate_from_powers(
            &ext_powers,
            r_order,
            seed::split(ec.base_seed, 0x1a61 + lag as u64),
        )?;
        out.push((lag as f64 * ec.grid.spacing(), phi, ext));
    }
    Ok(out)
}

/// Least squares of `y` against `ln`-abscissa points `(x, y)`; returns
/// `(slope, intercept, r^2)`.
pub fn fit_against_log(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx, if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) })
}

fn run_sg_probe(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let summary = sg_probe_summary(&ec)?;
    Ok(ExperimentOutput {
        name: "sg-probe".into(),
        csv_header: vec!["case".into(), "lhs".into(), "rhs".into(), "ratio".into()],
        csv_rows: summary.1,
        summary: summary.0,
        failures: Vec::new(),
    })
}

/// The two spectral-gap probes: the exact-variance linear functional of the
/// Gaussian field, and the box-averaged flux functional with its Malliavin
/// derivative, across three box radii.
pub fn sg_probe_summary(ec: &EnsembleConfig) -> Result<(serde_json::Value, Vec<Vec<String>>)> {
    let grid = ec.grid;
    let spectrum = DiscreteSpectrum::new(&grid, &ec.cov);
    // case 1: linear functional, exact Gaussian variance oracle
    let weights = ScalarField::from_fn(grid, |c| {
        if c[0] < grid.points_per_side() / 4 {
            1.0
        } else {
            0.0
        }
    });
    let exact = spectrum.linear_functional_variance(&weights);
    let (lin, _) = collect_samples(ec.n_samples, |s| {
        let smp = sample_gaussian_with(&grid, &spectrum, ec.sample_seed(s), false)?;
        Ok(grid.cell_volume()
            * weights
                .values()
                .iter()
                .zip(smp.fields[0].values())
                .map(|(w, g)| w * g)
                .sum::<f64>())
    });
    require_any(&lin, "sg linear case")?;
    let vals: Vec<f64> = lin.iter().map(|(_, v)| *v).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let centered: Vec<f64> = vals.iter().map(|v| v - mean).collect();
    let var_est = moment_estimate(&centered, 1, seed::split(ec.base_seed, 0x11))?;
    let linear_covered = var_est.ci_low <= exact && exact <= var_est.ci_high;

    // case 2: box-averaged flux component across three box radii
    let mut rows = vec![vec![
        "linear".into(),
        fmt_f64(var_est.value),
        fmt_f64(exact),
        fmt_f64(var_est.value / exact),
    ]];
    let mut ratios = Vec::new();
    for (k, radius) in [2.0, 4.0, 8.0].into_iter().enumerate() {
        if radius > grid.side_length() / 2.0 {
            continue;
        }
        let ball = GridBox::linf_ball(&grid, 0, radius)?;
        let count = (ball.vol(&grid)) as f64;
        let probe = spectral_gap_probe(
            &EnsembleConfig {
                base_seed: seed::split(ec.base_seed, 0x5f + k as u64),
                ..ec.clone()
            },
            |_, a| {
                let spectral = SpectralSolver::new(&grid);
                let tight = SolverConfig { tol: ec.solver.corrector_tol(), ..ec.solver };
                // F = box-average of the flux component q_{1,1}
                let mut fe = EdgeField::zeros(grid);
                fe.component_mut(0).copy_from_slice(a.component(0));
                let problem =
                    MassiveProblem::new(a.clone(), f64::INFINITY, ScalarField::zeros(grid), fe)?;
                let sol = solve_variable_with(&spectral, &problem, &tight)?;
                let mut fsum = 0.0;
                let mut indicator = EdgeField::zeros(grid);
                ball.for_each_site(&grid, |idx| {
                    fsum += a.component(0)[idx] * (1.0 + sol.grad_u.component(0)[idx]);
                    indicator.component_mut(0)[idx] = 1.0 / count;
                });
                let f_val = fsum / count;
                // dF/da via the flux representation: (grad v + g) (x) grad u
                // with g the box indicator on component 1 and
                // div(a(grad v + g)) = 0
                let mut ag = EdgeField::zeros(grid);
                for (o, (&av, &gv)) in ag
                    .component_mut(0)
                    .iter_mut()
                    .zip(a.component(0).iter().zip(indicator.component(0)))
                {
                    *o = av * gv;
                }
                let dualp =
                    MassiveProblem::new(a.clone(), f64::INFINITY, ScalarField::zeros(grid), ag)?;
                let v = solve_variable_with(&spectral, &dualp, &tight)?;
                let mut deriv = EdgeField::zeros(grid);
                for j in 0..grid.dim() {
                    let gv = v.grad_u.component(j);
                    let gu = sol.grad_u.component(j);
                    let ind = indicator.component(j);
                    let dv = deriv.component_mut(j);
                    for idx in 0..grid.vol() {
                        let e0 = if j == 0 { 1.0 } else { 0.0 };
                        dv[idx] = (gv[idx] + ind[idx]) * (e0 + gu[idx]);
                    }
                }
                Ok((f_val, deriv))
            },
        )?;
        ratios.push(probe.ratio);
        rows.push(vec![
            format!("flux_r{radius}"),
            fmt_f64(probe.var_estimate.value),
            fmt_f64(probe.rhs_estimate.value),
            fmt_f64(probe.ratio),
        ]);
    }
    let summary = json!({
        "linear_exact_variance": exact,
        "linear_estimate": var_est,
        "linear_ci_covers_exact": linear_covered,
        "flux_ratios": ratios,
        "max_flux_ratio": ratios.iter().cloned().fold(0.0, f64::max),
    });
    Ok((summary, rows))
}

fn run_cz_probe(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ec = ensemble_config(config)?;
    let p = config.experiment.p.unwrap_or(4.0);
    let r = config.experiment.r.unwrap_or(4.0);
    let r_prime = config.experiment.r_prime.unwrap_or(2.0);
    let t_list = config.experiment.t_list.clone().unwrap_or_else(|| vec![1.0, 4.0, 16.0, 64.0]);
    let family = default_rhs_family(ec.grid.dim());
    let report = cz_constant_probe(&ec, p, r_prime, r, &t_list, &family, None)?;
    let header =
        vec!["T".into(), "rhs".into(), "lhs_norm".into(), "rhs_norm".into(), "ratio".into()];
    let rows = report
        .rows
        .iter()
        .map(|row| {
            vec![
                fmt_f64(row.t),
                row.rhs_label.clone(),
                fmt_f64(row.lhs_norm),
                fmt_f64(row.rhs_norm),
                fmt_f64(row.ratio),
            ]
        })
        .collect();
    Ok(ExperimentOutput {
        name: "cz-probe".into(),
        csv_header: header,
        csv_rows: rows,
        summary: serde_json::to_value(&report).map_err(|e| ShlError::Format(e.to_string()))?,
        failures: Vec::new(),
    })
}

pub fn default_rhs_family(d: usize) -> Vec<RhsFamily> {
    let mut fam = vec![
        RhsFamily::ModeF { axis: 0, mode: 1 },
        RhsFamily::ModeG { axis: 0, mode: 1 },
        RhsFamily::WhiteF,
        RhsFamily::CoefficientF { axis: 0 },
    ];
    if d >= 2 {
        fam.push(RhsFamily::ModeF { axis: 1, mode: 2 });
    }
    fam
}

/// Reruns the corrector sensitivity check on a fuzzed ensemble; used by the
/// acceptance suite and the probes.
pub fn sensitivity_ensemble(
    ec: &EnsembleConfig,
    n_samples: usize,
    eps_list: &[f64],
) -> Result<Vec<crate::correctors::SensitivityReport>> {
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let grid = ec.grid;
    let (ok, failures) = collect_samples(n_samples, |s| {
        let a = ec.sample_coefficient(&spectrum, s)?;
        let mut rng = seed::rng_for(seed::split(ec.base_seed, 0xde17a + s as u64));
        use rand::Rng;
        let mut g_test = EdgeField::zeros(grid);
        for v in g_test.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut delta = EdgeField::zeros(grid);
        let edge = rng.gen_range(0..grid.vol());
        delta.component_mut(0)[edge] = 0.5;
        corrector_sensitivity_check(&a, 0, &g_test, &delta, eps_list, &ec.solver)
    });
    if ok.len() < n_samples {
        return Err(ShlError::AllSamplesFailed(format!(
            "sensitivity ensemble: {} failures: {:?}",
            failures.len(),
            failures.first()
        )));
    }
    Ok(ok.into_iter().map(|(_, r)| r).collect())
}

/// Fluctuation-sensitivity over a fuzzed ensemble.
pub fn fluctuation_sensitivity_ensemble(
    ec: &EnsembleConfig,
    n_samples: usize,
    eps_list: &[f64],
) -> Result<Vec<crate::homogenization::FluctuationSensitivity>> {
    let spectrum = DiscreteSpectrum::new(&ec.grid, &ec.cov);
    let grid = ec.grid;
    let abar = pilot_abar(ec, 8)?;
    let eps = 1.0 / grid.side_length();
    let profile = MacroProfile::default_for(grid.dim(), eps);
    let (ok, failures) = collect_samples(n_samples, |s| {
        let spectral = SpectralSolver::new(&grid);
        let a = ec.sample_coefficient(&spectrum, s)?;
        let set = compute_correctors_with(&spectral, &a, &ec.solver)?;
        let mut rng = seed::rng_for(seed::split(ec.base_seed, 0xf1c + s as u64));
        use rand::Rng;
        let mut delta = EdgeField::zeros(grid);
        let edge = rng.gen_range(0..grid.vol());
        delta.component_mut(0)[edge] = 0.5;
        fluctuation_sensitivity_check(&a, &set, &profile, &abar, &delta, eps_list, &ec.solver)
    });
    if ok.len() < n_samples {
        return Err(ShlError::AllSamplesFailed(format!(
            "fluctuation sensitivity: {} failures: {:?}",
            failures.len(),
            failures.first()
        )));
    }
    Ok(ok.into_iter().map(|(_, r)| r).collect())
}

/// Picks `count` (d, n, lambda) fuzz cases deterministically.
pub fn fuzz_cases(count: usize, base_seed: u64) -> Vec<(usize, usize, f64, u64)> {
    let dims = [1usize, 2, 3];
    let ns = [32usize, 64];
    let lambdas = [0.1, 0.25, 0.5];
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let d = dims[k % dims.len()];
        // keep d=3 cases at n=32 except a few; n=64 in d=3 is the big case
        let n = if d == 3 {
            if k % 7 == 0 {
                64
            } else {
                32
            }
        } else {
            ns[(k / 3) % ns.len()]
        };
        let lambda = lambdas[(k / 2) % lambdas.len()];
        out.push((d, n, lambda, seed::split(base_seed, k as u64)));
    }
    out
}
