//! Baseline cohort data: the fully observed response design, the association
//! design, the partially observed outcome and the response indicators.

use nalgebra::{DMatrix, DVector};

use crate::error::{IpwError, Result};

/// A cohort prepared for IPW analysis.
///
/// `x` (response design) must be finite for every row. `z` and `y` only need
/// to be finite for respondents; nonrespondent entries may be `NaN` and are
/// never read by the estimators. Both designs carry their intercept column.
#[derive(Debug, Clone)]
pub struct AnalysisDataset {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
    r: Vec<bool>,
    v: DVector<f64>,
}

impl AnalysisDataset {
    /// Builds and validates a dataset. `v` defaults to all ones.
    pub fn new(
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y: DVector<f64>,
        r: Vec<bool>,
        v: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = r.len();
        let v = v.unwrap_or_else(|| DVector::from_element(n, 1.0));
        if x.nrows() != n || z.nrows() != n || y.len() != n || v.len() != n {
            return Err(IpwError::DimensionMismatch(format!(
                "rows: x={}, z={}, y={}, v={}, r={}",
                x.nrows(),
                z.nrows(),
                y.len(),
                v.len(),
                n
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(IpwError::DimensionMismatch(
                "design matrices need at least one column".into(),
            ));
        }
        for i in 0..n {
            if x.row(i).iter().any(|e| !e.is_finite()) {
                return Err(IpwError::InvalidDataset(format!(
                    "response covariates missing or non-finite in row {i}"
                )));
            }
            if r[i] {
                if !y[i].is_finite() || z.row(i).iter().any(|e| !e.is_finite()) {
                    return Err(IpwError::InvalidDataset(format!(
                        "respondent row {i} lacks outcome or association covariates"
                    )));
                }
                if !(v[i] > 0.0 && v[i].is_finite()) {
                    return Err(IpwError::InvalidDataset(format!(
                        "variance structure must be positive, got {} in row {i}",
                        v[i]
                    )));
                }
            }
        }
        Ok(Self { x, z, y, r, v })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    /// Number of response-model columns.
    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// Number of association-model columns.
    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn r(&self) -> &[bool] {
        &self.r
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn responded(&self, i: usize) -> bool {
        self.r[i]
    }

    /// Response indicator as 0.0 / 1.0.
    pub fn r_value(&self, i: usize) -> f64 {
        if self.r[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn respondent_count(&self) -> usize {
        self.r.iter().filter(|&&r| r).count()
    }

    /// Indices of respondents, in row order.
    pub fn respondents(&self) -> impl Iterator<Item = usize> + '_ {
        self.r.iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i)
    }

    /// Applies a row permutation: row `k` of the result is row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(IpwError::DimensionMismatch("permutation length".into()));
        }
        let x = DMatrix::from_fn(self.n(), self.q(), |i, j| self.x[(perm[i], j)]);
        let z = DMatrix::from_fn(self.n(), self.p(), |i, j| self.z[(perm[i], j)]);
        let y = DVector::from_fn(self.n(), |i, _| self.y[perm[i]]);
        let v = DVector::from_fn(self.n(), |i, _| self.v[perm[i]]);
        let r = perm.iter().map(|&k| self.r[k]).collect();
        Self::new(x, z, y, r, Some(v))
    }

    /// Equality that treats entries never read by the estimators (nonrespondent
    /// outcome, association design and variance structure) as don't-care.
    pub fn same_observed(&self, other: &Self) -> bool {
        if self.n() != other.n() || self.q() != other.q() || self.p() != other.p() {
            return false;
        }
        if self.r != other.r || self.x != other.x {
            return false;
        }
        self.respondents().all(|i| {
            self.y[i] == other.y[i]
                && self.v[i] == other.v[i]
                && self.z.row(i) == other.z.row(i)
        })
    }
}
