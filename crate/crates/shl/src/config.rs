//! TOML experiment configuration: schema-validated sections, unknown keys
//! rejected, and a canonical-form digest recorded in every output.

use crate::error::{Result, ShlError};
use crate::grid::PeriodicGrid;
use crate::homogenization::{MacroProfile, ProfileTerm};
use crate::randomfield::{CoefficientMap, CovarianceSpec, MapForm};
use crate::solver::{Method, SolverConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub d: usize,
    pub n: usize,
    #[serde(default = "default_h")]
    pub h: f64,
}

fn default_h() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    pub nu: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub lambda: f64,
    #[serde(default = "default_map")]
    pub map: String,
}

fn default_map() -> String {
    "sigmoid".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_method")]
    pub method: String,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    10_000
}
fn default_method() -> String {
    "pcg".into()
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { tol: default_tol(), max_iter: default_max_iter(), method: default_method() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub n_samples: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileTermSection {
    pub dir: usize,
    pub mode: Vec<i32>,
    pub amp: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesSection {
    #[serde(default)]
    pub f: Vec<ProfileTermSection>,
    #[serde(default)]
    pub g: Vec<ProfileTermSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default, rename = "T")]
    pub t: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub lags: Option<Vec<usize>>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub r_prime: Option<f64>,
    #[serde(default, rename = "T_list")]
    pub t_list: Option<Vec<f64>>,
    #[serde(default)]
    pub moment_order: Option<usize>,
    #[serde(default)]
    pub profiles: Option<ProfilesSection>,
}

/// The full experiment configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub covariance: CovarianceSection,
    pub map: MapSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub ensemble: EnsembleSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| ShlError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.covariance()?;
        self.coefficient_map()?;
        self.solver_config()?;
        if self.ensemble.n_samples < 1 {
            return Err(ShlError::Config("ensemble.n_samples must be >= 1".into()));
        }
        const KNOWN: [&str; 10] = [
            "sample",
            "correctors",
            "massive-correctors",
            "oscillation",
            "fluctuation",
            "splitting",
            "rates",
            "sg-probe",
            "cz-probe",
            "increments",
        ];
        if !KNOWN.contains(&self.experiment.name.as_str()) {
            return Err(ShlError::Config(format!(
                "unknown experiment '{}'; expected one of {KNOWN:?}",
                self.experiment.name
            )));
        }
        if let Some(profiles) = &self.experiment.profiles {
            for t in profiles.f.iter().chain(&profiles.g) {
                if t.mode.len() != self.grid.d {
                    return Err(ShlError::Config("profile mode length must equal d".into()));
                }
                if t.dir >= self.grid.d {
                    return Err(ShlError::Config("profile dir out of range".into()));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.grid.d, self.grid.n, self.grid.h)
            .map_err(|e| ShlError::Config(e.to_string()))
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.covariance.nu, self.covariance.variance)
            .map_err(|e| ShlError::Config(e.to_string()))
    }

    pub fn coefficient_map(&self) -> Result<CoefficientMap> {
        if self.map.map != "sigmoid" {
            return Err(ShlError::Config(format!(
                "unknown map '{}'; only 'sigmoid' is configured",
                self.map.map
            )));
        }
        let m = CoefficientMap::sigmoid(self.map.lambda)
            .map_err(|e| ShlError::Config(e.to_string()))?;
        debug_assert_eq!(m.form, MapForm::Sigmoid);
        Ok(m)
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let method = match self.solver.method.as_str() {
            "pcg" => Method::Pcg,
            "meyers" => Method::Meyers,
            other => {
                return Err(ShlError::Config(format!(
                    "unknown solver method '{other}' (expected pcg or meyers)"
                )))
            }
        };
        if !(self.solver.tol > 0.0) {
            return Err(ShlError::Config("solver.tol must be positive".into()));
        }
        Ok(SolverConfig { tol: self.solver.tol, max_iter: self.solver.max_iter, method })
    }

    /// Macro profile for a given epsilon, from the config or the canonical
    /// defaults.
    pub fn macro_profile(&self, epsilon: f64) -> Result<MacroProfile> {
        match &self.experiment.profiles {
            None => Ok(MacroProfile::default_for(self.grid.d, epsilon)),
            Some(p) => {
                let conv = |terms: &[ProfileTermSection]| -> Vec<ProfileTerm> {
                    terms
                        .iter()
                        .map(|t| {
                            let mut mode = [0i32; 3];
                            for (i, m) in t.mode.iter().enumerate() {
                                mode[i] = *m;
                            }
                            ProfileTerm { dir: t.dir, mode, amp: t.amp, phase: t.phase }
                        })
                        .collect()
                };
                MacroProfile::new(epsilon, conv(&p.f), conv(&p.g))
            }
        }
    }

    /// Canonical-form digest: SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[grid]
d = 2
n = 32

[covariance]
nu = 1.0
variance = 1.0

[map]
lambda = 0.25

[solver]
tol = 1e-10

[ensemble]
n_samples = 4
base_seed = 7

[experiment]
name = "correctors"
"#;

    #[test]
    fn parses_and_hashes() {
        let c = ExperimentConfig::from_toml(GOOD).unwrap();
        assert_eq!(c.grid.n, 32);
        assert_eq!(c.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        // changing a value changes the hash
        let mut c2 = c.clone();
        c2.ensemble.base_seed = 8;
        assert_ne!(c.hash(), c2.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let bad = GOOD.replace("[experiment]", "[experiment]\nbogus_key = 1");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = GOOD.replace("n = 32", "n = 33");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = GOOD.replace("name = \"correctors\"", "name = \"nonsense\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = GOOD.replace("lambda = 0.25", "lambda = 1.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        // missing [grid]
        let bad = GOOD.replace("[grid]\nd = 2\nn = 32\n", "");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn solver_and_map_sections() {
        let c = ExperimentConfig::from_toml(GOOD).unwrap();
        let s = c.solver_config().unwrap();
        assert_eq!(s.tol, 1e-10);
        let m = c.coefficient_map().unwrap();
        assert_eq!(m.lambda, 0.25);
        let bad = GOOD.replace("tol = 1e-10", "tol = 1e-10\nmethod = \"magic\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
