//! The SHF1 on-disk field format.
//!
//! Layout: 8-byte magic `SHF1\0\0\0\0`; u32 d; u32 kind (0 scalar, 1 edge,
//! 2 plaquette); u64 n; f64 h; then the payload as little-endian f64,
//! row-major, direction-major for the staggered kinds. A JSON sidecar
//! `<name>.json` carries grid metadata and provenance.

use crate::error::{Result, ShlError};
use crate::field::{EdgeField, PlaquetteField, ScalarField};
use crate::grid::PeriodicGrid;
use crate::io::Provenance;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"SHF1\0\0\0\0";

/// Largest accepted grid side; keeps payload sizes sane when decoding
/// untrusted headers.
pub const MAX_N: u64 = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Scalar,
    Edge,
    Plaquette,
}

impl Kind {
    fn code(self) -> u32 {
        match self {
            Kind::Scalar => 0,
            Kind::Edge => 1,
            Kind::Plaquette => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Kind::Scalar),
            1 => Ok(Kind::Edge),
            2 => Ok(Kind::Plaquette),
            _ => Err(ShlError::Format(format!("unknown field kind {c}"))),
        }
    }

    fn per_site(self, d: usize) -> usize {
        match self {
            Kind::Scalar => 1,
            Kind::Edge => d,
            Kind::Plaquette => d * (d - 1) / 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Scalar => "scalar",
            Kind::Edge => "edge",
            Kind::Plaquette => "plaquette",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub kind: String,
    pub d: usize,
    pub n: usize,
    pub h: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Decoded header and payload of an SHF1 blob.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub grid: PeriodicGrid,
    pub kind: Kind,
    pub values: Vec<f64>,
}

/// Decodes an SHF1 blob from bytes, validating magic, bounds, payload length
/// and finiteness. Safe on untrusted input.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 8 + 4 + 4 + 8 + 8 {
        return Err(ShlError::Format("truncated header".into()));
    }
    if bytes[..8] != MAGIC {
        return Err(ShlError::Format("bad magic".into()));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let kind = Kind::from_code(u32::from_le_bytes(bytes[12..16].try_into().unwrap()))?;
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let h = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if !(1..=3).contains(&d) {
        return Err(ShlError::Format(format!("bad dimension {d}")));
    }
    if n < 4 || n > MAX_N || !n.is_power_of_two() {
        return Err(ShlError::Format(format!("bad side length {n}")));
    }
    if !h.is_finite() || h <= 0.0 {
        return Err(ShlError::Format(format!("bad spacing {h}")));
    }
    let d = d as usize;
    let grid = PeriodicGrid::new(d, n as usize, h)
        .map_err(|e| ShlError::Format(e.to_string()))?;
    let count = grid
        .vol()
        .checked_mul(kind.per_site(d))
        .ok_or_else(|| ShlError::Format("payload size overflow".into()))?;
    let payload = &bytes[32..];
    if payload.len() != count * 8 {
        return Err(ShlError::Format(format!(
            "payload length {} does not match {} values",
            payload.len(),
            count
        )));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(ShlError::Format("non-finite value in payload".into()));
        }
        values.push(v);
    }
    Ok(Decoded { grid, kind, values })
}

fn encode(grid: &PeriodicGrid, kind: Kind, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + values.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    out.extend_from_slice(&kind.code().to_le_bytes());
    out.extend_from_slice(&(grid.points_per_side() as u64).to_le_bytes());
    out.extend_from_slice(&grid.spacing().to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_with_sidecar(
    path: &Path,
    grid: &PeriodicGrid,
    kind: Kind,
    values: &[f64],
    provenance: &Provenance,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(grid, kind, values))?;
    let sidecar = Sidecar {
        format: "SHF1".into(),
        kind: kind.name().into(),
        d: grid.dim(),
        n: grid.points_per_side(),
        h: grid.spacing(),
        seed: provenance.seed,
        config_hash: provenance.config_hash.clone(),
    };
    let json_path = path.with_extension("json");
    let out = std::fs::File::create(json_path)?;
    serde_json::to_writer_pretty(out, &sidecar).map_err(|e| ShlError::Format(e.to_string()))?;
    Ok(())
}

pub fn write_scalar(path: &Path, f: &ScalarField, provenance: &Provenance) -> Result<()> {
    write_with_sidecar(path, &f.grid(), Kind::Scalar, f.values(), provenance)
}

pub fn write_edge(path: &Path, f: &EdgeField, provenance: &Provenance) -> Result<()> {
    write_with_sidecar(path, &f.grid(), Kind::Edge, f.values(), provenance)
}

pub fn write_plaquette(path: &Path, f: &PlaquetteField, provenance: &Provenance) -> Result<()> {
    write_with_sidecar(path, &f.grid(), Kind::Plaquette, f.values(), provenance)
}

fn read_decoded(path: &Path) -> Result<Decoded> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    let dec = read_decoded(path)?;
    if dec.kind != Kind::Scalar {
        return Err(ShlError::Format(format!("expected scalar, found {}", dec.kind.name())));
    }
    ScalarField::from_values(dec.grid, dec.values)
}

pub fn read_edge(path: &Path) -> Result<EdgeField> {
    let dec = read_decoded(path)?;
    if dec.kind != Kind::Edge {
        return Err(ShlError::Format(format!("expected edge, found {}", dec.kind.name())));
    }
    EdgeField::from_values(dec.grid, dec.values)
}

pub fn read_plaquette(path: &Path) -> Result<PlaquetteField> {
    let dec = read_decoded(path)?;
    if dec.kind != Kind::Plaquette {
        return Err(ShlError::Format(format!(
            "expected plaquette, found {}",
            dec.kind.name()
        )));
    }
    PlaquetteField::from_values(dec.grid, dec.values)
}
