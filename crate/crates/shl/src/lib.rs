//! Numerical laboratory for quantitative stochastic homogenization on a
//! periodic lattice: Gaussian coefficient ensembles, (massive) correctors,
//! homogenized coefficients, two-scale expansions, homogenization
//! commutators and fluctuation statistics, with the defining identities
//! verified to solver tolerance.

pub mod config;
pub mod correctors;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod field;
pub mod grid;
pub mod homogenization;
pub mod io;
pub mod ops;
pub mod randomfield;
pub mod seed;
pub mod solver;
pub mod tensor;

pub use error::{Result, ShlError};
pub use field::{EdgeField, FieldNorms, PlaquetteField, ScalarField};
pub use grid::{GridBox, PeriodicGrid};
