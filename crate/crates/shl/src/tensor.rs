//! Small dense d x d tensors (d <= 3) for homogenized coefficients.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub d: usize,
    /// Row-major entries; `a[i][j]` multiplies the j-th gradient component in
    /// row i of the flux.
    pub a: [[f64; 3]; 3],
}

impl Tensor {
    pub fn zeros(d: usize) -> Self {
        Self { d, a: [[0.0; 3]; 3] }
    }

    pub fn identity(d: usize) -> Self {
        let mut t = Self::zeros(d);
        for i in 0..d {
            t.a[i][i] = 1.0;
        }
        t
    }

    pub fn scalar(d: usize, c: f64) -> Self {
        let mut t = Self::zeros(d);
        for i in 0..d {
            t.a[i][i] = c;
        }
        t
    }

    pub fn diagonal(d: usize, diag: &[f64]) -> Self {
        let mut t = Self::zeros(d);
        for i in 0..d {
            t.a[i][i] = diag[i];
        }
        t
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.a[i][i]).collect()
    }

    /// Diagonal part as a tensor.
    pub fn diag_part(&self) -> Tensor {
        Tensor::diagonal(self.d, &self.diag())
    }

    pub fn transpose(&self) -> Tensor {
        let mut t = Tensor::zeros(self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                t.a[i][j] = self.a[j][i];
            }
        }
        t
    }

    pub fn symmetrized(&self) -> Tensor {
        let mut t = Tensor::zeros(self.d);
        for i in 0..self.d {
            for j in 0..self.d {
                t.a[i][j] = 0.5 * (self.a[i][j] + self.a[j][i]);
            }
        }
        t
    }

    pub fn max_offdiag(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.d {
            for j in 0..self.d {
                if i != j {
                    m = m.max(self.a[i][j].abs());
                }
            }
        }
        m
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let mut t = *self;
        for i in 0..self.d {
            for j in 0..self.d {
                t.a[i][j] *= c;
            }
        }
        t
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut t = *self;
        for i in 0..self.d {
            for j in 0..self.d {
                t.a[i][j] += other.a[i][j];
            }
        }
        t
    }

    /// Eigenvalues of the symmetrized tensor, ascending (cyclic Jacobi).
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        let mut m = self.symmetrized().a;
        let d = self.d;
        for _sweep in 0..50 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += m[p][q] * m[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    if m[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..d {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..d).map(|i| m[i][i]).collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    /// Smallest eigenvalue of the symmetric part (ellipticity constant).
    pub fn min_sym_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigenvalues_3x3() {
        let mut t = Tensor::zeros(3);
        t.a = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let ev = t.sym_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
        assert!((ev[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn symmetrize_and_offdiag() {
        let mut t = Tensor::identity(2);
        t.set(0, 1, 0.2);
        assert!((t.symmetrized().get(1, 0) - 0.1).abs() < 1e-15);
        assert!((t.max_offdiag() - 0.2).abs() < 1e-15);
    }
}
