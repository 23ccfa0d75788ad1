//! Cholesky factorisation with diagonal jitter escalation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Initial jitter as a fraction of the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up, as a fraction of the mean diagonal.
pub const JITTER_MAX: f64 = 1e-2;

const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric matrix expected to be positive definite once a small jitter
/// is added to its diagonal.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::invalid(format!(
                "matrix must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::invalid(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    /// Like [`SpdMatrix::factor`] but tries the matrix unmodified first.
    pub fn factor_exact_first(&self, name: &str) -> Result<SpdFactor> {
        if let Some(chol) = Cholesky::new(self.entries.clone()) {
            let l = chol.l_dirty();
            let n = l.nrows();
            if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok(SpdFactor { chol, jitter: 0.0 });
            }
        }
        self.factor(name)
    }

    /// Factorises `A + jitter * I`, escalating the jitter tenfold from
    /// `JITTER_START * mean(diag)` up to `JITTER_MAX * mean(diag)`.
    pub fn factor(&self, name: &str) -> Result<SpdFactor> {
        let n = self.entries.nrows();
        let mean_diag = (0..n).map(|i| self.entries[(i, i)]).sum::<f64>() / n.max(1) as f64;
        let scale = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut m = self.entries.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                let l = chol.l_dirty();
                if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                    return Ok(SpdFactor { chol, jitter });
                }
            }
            rel *= 10.0;
        }
        Err(Error::NotPositiveDefinite {
            name: name.to_string(),
            jitter: JITTER_MAX * scale,
        })
    }
}

/// Cholesky factor of a jittered SPD matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Diagonal jitter that made the factorisation succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Lower-triangular factor.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Solves `A x = b` for SPD `A` using the jitter policy.
pub fn chol_solve(a: &SpdMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != a.entries.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.entries.nrows(),
            actual: b.nrows(),
        });
    }
    Ok(a.factor("A")?.solve_mat(b))
}

/// Symmetrises in place: `(A + A^T) / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
