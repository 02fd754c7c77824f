//! Small dense helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Eigenvalue ratio below which a symmetric matrix is treated as singular.
const RANK_TOLERANCE: f64 = 1e-13;

/// Cholesky factor of a symmetric positive-definite matrix, rejected when the
/// matrix is numerically rank deficient.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 || m.iter().any(|e| !e.is_finite()) {
            return None;
        }
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if max <= 0.0 || min <= RANK_TOLERANCE * max {
            return None;
        }
        Cholesky::new(m.clone()).map(|chol| Self { chol })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// True when the columns of `m` are numerically linearly independent.
pub fn full_column_rank(m: &DMatrix<f64>) -> bool {
    if m.nrows() < m.ncols() {
        return false;
    }
    SpdFactor::new(&(m.transpose() * m)).is_some()
}

/// Replaces `m` by `(m + mᵀ)/2` so round-off never breaks symmetry.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `scale · Σ_k c_k c_kᵀ` over the columns of `cols`.
pub fn scaled_outer_sum(cols: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut out = cols * cols.transpose();
    out *= scale;
    symmetrize(&mut out);
    out
}

/// Logistic function, stable for large |t|.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
