//! Dense linear algebra shared by every model: Cholesky-based SPD solves,
//! log-determinants and an overflow-safe log-sum-exp.
//!
//! All inversions in the crate go through [`SpdFactor`]; explicit inverses
//! are only formed where a model precomputes a precision for repeated
//! quadratic forms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower Cholesky factor `L` of a symmetric positive-definite matrix `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::arg(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix has non-finite entries"));
        }
        let n = a.nrows();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for j in 0..n {
            for i in (j + 1)..n {
                if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::arg(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }

        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(SpdFactor { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_in_place(&self, b: &mut Matrix) {
        self.lower.solve_lower_triangular_mut(b);
        self.lower.tr_solve_lower_triangular_mut(b);
    }

    /// Whitens the columns of `b` in place: `b ← L⁻¹ b`.
    pub fn whiten_in_place(&self, b: &mut Matrix) {
        self.lower.solve_lower_triangular_mut(b);
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim(), self.dim()))
    }
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::arg(format!(
            "solve_spd: lhs is {}x{} but rhs has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    Ok(SpdFactor::new(a)?.solve(b))
}

pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    Ok(SpdFactor::new(a)?.logdet())
}

/// `ln Σ exp(v_k)` using the max-shift formulation.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::arg("logsumexp of an empty vector"));
    }
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Clamps the eigenvalues of a symmetric matrix from below. Returns the
/// floored matrix and the number of eigenvalues that were raised.
pub fn floor_eigenvalues(a: &Matrix, floor: f64) -> (Matrix, usize) {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let raised = eig.eigenvalues.iter().filter(|&&l| l < floor).count();
    if raised == 0 {
        return (sym, 0);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let mut out = v * Matrix::from_diagonal(&clamped) * v.transpose();
    symmetrize(&mut out);
    (out, raised)
}

pub(crate) fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}
