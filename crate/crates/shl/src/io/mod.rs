//! Persistence: the SHF1 binary field format with its JSON sidecar,
//! corrector-set directories, and deterministic CSV writers.

pub mod shf1;

use crate::correctors::CorrectorSet;
use crate::error::{Result, ShlError};
use crate::field::{EdgeField, PlaquetteField, ScalarField};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Provenance attached to persisted fields and manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Manifest of a persisted corrector set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorManifest {
    pub d: usize,
    pub n: usize,
    pub h: f64,
    pub abar_box: Vec<Vec<f64>>,
    pub flux_divergence: Vec<f64>,
    pub flux_identity: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.d).map(|i| (0..t.d).map(|j| t.get(i, j)).collect()).collect()
}

/// Persists a corrector set as SHF1 fields plus a JSON manifest.
pub fn save_corrector_set(
    dir: &Path,
    set: &CorrectorSet,
    provenance: &Provenance,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, phi) in set.phi.iter().enumerate() {
        shf1::write_scalar(&dir.join(format!("phi_{i}.shf1")), phi, provenance)?;
    }
    for (i, q) in set.q.iter().enumerate() {
        shf1::write_edge(&dir.join(format!("q_{i}.shf1")), q, provenance)?;
    }
    for (i, sig) in set.sigma.iter().enumerate() {
        shf1::write_plaquette(&dir.join(format!("sigma_{i}.shf1")), sig, provenance)?;
    }
    let grid = set.phi[0].grid();
    let manifest = CorrectorManifest {
        d: grid.dim(),
        n: grid.points_per_side(),
        h: grid.spacing(),
        abar_box: tensor_rows(&set.abar_box),
        flux_divergence: set.residuals.flux_divergence.clone(),
        flux_identity: set.residuals.flux_identity.clone(),
        seed: provenance.seed,
        config_hash: provenance.config_hash.clone(),
    };
    let out = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(out, &manifest)
        .map_err(|e| ShlError::Format(e.to_string()))?;
    Ok(())
}

/// Loads the fields of a persisted corrector set (manifest + SHF1 files).
pub fn load_corrector_fields(
    dir: &Path,
) -> Result<(CorrectorManifest, Vec<ScalarField>, Vec<EdgeField>, Vec<PlaquetteField>)> {
    let manifest: CorrectorManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)
            .map_err(|e| ShlError::Format(e.to_string()))?;
    let mut phi = Vec::new();
    let mut q = Vec::new();
    let mut sigma = Vec::new();
    for i in 0..manifest.d {
        phi.push(shf1::read_scalar(&dir.join(format!("phi_{i}.shf1")))?);
        q.push(shf1::read_edge(&dir.join(format!("q_{i}.shf1")))?);
        sigma.push(shf1::read_plaquette(&dir.join(format!("sigma_{i}.shf1")))?);
    }
    Ok((manifest, phi, q, sigma))
}

/// Deterministic CSV writer: fixed column order, no timestamps, values in
/// shortest round-trip form so reruns are byte-identical.
pub struct CsvWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &[&str]) -> Result<Self> {
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn finish(self) -> W {
        self.out
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correctors::compute_correctors;
    use crate::randomfield::{sample_coefficient, CoefficientMap, CovarianceSpec};
    use crate::solver::SolverConfig;

    #[test]
    fn corrector_set_round_trip() {
        let g = crate::PeriodicGrid::new(2, 8, 1.0).unwrap();
        let cov = CovarianceSpec::new(1.0, 1.0).unwrap();
        let map = CoefficientMap::sigmoid(0.25).unwrap();
        let a = sample_coefficient(&g, &cov, &map, 77).unwrap();
        let set = compute_correctors(&a, &SolverConfig::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("shl_cs_{}", std::process::id()));
        let prov = Provenance { seed: 77, config_hash: "deadbeef".into() };
        save_corrector_set(&dir, &set, &prov).unwrap();
        let (manifest, phi, q, sigma) = load_corrector_fields(&dir).unwrap();
        assert_eq!(manifest.n, 8);
        assert_eq!(phi.len(), 2);
        assert_eq!(phi[0].values(), set.phi[0].values());
        assert_eq!(q[1].values(), set.q[1].values());
        assert_eq!(sigma[0].values(), set.sigma[0].values());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_is_deterministic() {
        let mut buf1 = Vec::new();
        let mut w = CsvWriter::new(&mut buf1, &["a", "b"]).unwrap();
        w.row(&[fmt_f64(1.5), fmt_f64(f64::INFINITY)]).unwrap();
        drop(w);
        let mut buf2 = Vec::new();
        let mut w = CsvWriter::new(&mut buf2, &["a", "b"]).unwrap();
        w.row(&[fmt_f64(1.5), fmt_f64(f64::INFINITY)]).unwrap();
        drop(w);
        assert_eq!(buf1, buf2);
        assert_eq!(String::from_utf8(buf1).unwrap(), "a,b\n1.5,inf\n");
    }
}
