//! Variance estimators for the IPW regression coefficients.
//!
//! * naive: `σ̂² G⁻¹`, the default weighted-regression output;
//! * robust: `n/(n−1) Σ V_i V_iᵀ` with `V_i = G⁻¹ (R_i/p̂_i) v_i⁻¹ Z_i e_i`,
//!   treating the weights as known;
//! * linearized: `n/(n−1) Σ U_i U_iᵀ` where `U_i` subtracts
//!   `G⁻¹ (R_i − p̂_i) γ̂ᵀX_i` to account for the estimated response model.
//!
//! `G = Σ_i (R_i/p̂_i) v_i⁻¹ Z_i Z_iᵀ` throughout.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::association::AssociationFit;
use crate::dataset::AnalysisDataset;
use crate::error::{IpwError, Result};
use crate::linalg::{scaled_outer_sum, symmetrize, SpdFactor};
use crate::response::{ProbabilitySource, ResponseFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    Naive,
    Robust,
    Linearized,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::Naive,
        EstimatorKind::Robust,
        EstimatorKind::Linearized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Robust => "robust",
            EstimatorKind::Linearized => "linearized",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(EstimatorKind::Naive),
            "robust" => Ok(EstimatorKind::Robust),
            "linearized" | "linearised" => Ok(EstimatorKind::Linearized),
            other => Err(format!("unknown estimator {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub kind: EstimatorKind,
    pub cov: DMatrix<f64>,
    pub se: DVector<f64>,
}

impl VarianceEstimate {
    fn new(kind: EstimatorKind, mut cov: DMatrix<f64>) -> Self {
        symmetrize(&mut cov);
        let se = cov.diagonal().map(|v| v.max(0.0).sqrt());
        Self { kind, cov, se }
    }
}

/// Per-individual influence values behind the robust and linearized
/// estimators. Column `i` of `u` / `v` belongs to individual `i`.
#[derive(Debug, Clone)]
pub struct InfluenceDecomposition {
    /// q × p.
    pub gamma_hat: DMatrix<f64>,
    /// p × n linearized influence values.
    pub u: DMatrix<f64>,
    /// p × n robust influence values (zero for nonrespondents).
    pub v: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinearizedOptions {
    /// Permit the linearized estimator on externally supplied probabilities.
    pub allow_known_probabilities: bool,
}

fn check_consistent(afit: &AssociationFit, p_hat: &DVector<f64>, dataset: &AnalysisDataset) -> Result<()> {
    if p_hat.len() != dataset.n()
        || afit.residuals.len() != dataset.n()
        || afit.beta_hat.len() != dataset.p()
    {
        return Err(IpwError::DimensionMismatch(
            "fits are not consistent with the dataset".into(),
        ));
    }
    Ok(())
}

fn finite_sample_factor(n: usize) -> f64 {
    n as f64 / (n as f64 - 1.0)
}

/// `σ̂² G⁻¹`.
pub fn naive_variance(
    afit: &AssociationFit,
    p_hat: &DVector<f64>,
    dataset: &AnalysisDataset,
) -> Result<VarianceEstimate> {
    check_consistent(afit, p_hat, dataset)?;
    let cov = afit.gram_factor.inverse() * afit.sigma2_hat;
    Ok(VarianceEstimate::new(EstimatorKind::Naive, cov))
}

/// The naive matrix exactly as `(Σ_i Z_i Z_iᵀ / p̂_i)⁻¹` summed over all
/// individuals, with neither `R_i`, `v_i` nor a residual variance. Exposed
/// for comparison only; requires `Z` to be observed for every row.
pub fn naive_variance_literal(dataset: &AnalysisDataset, p_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    if p_hat.len() != dataset.n() {
        return Err(IpwError::DimensionMismatch("probability length".into()));
    }
    let p = dataset.p();
    let mut m = DMatrix::zeros(p, p);
    for i in 0..dataset.n() {
        let zi = dataset.z().row(i).transpose();
        if zi.iter().any(|e| !e.is_finite()) {
            return Err(IpwError::MissingDesign(i));
        }
        m.ger(1.0 / p_hat[i], &zi, &zi, 1.0);
    }
    symmetrize(&mut m);
    let factor = SpdFactor::new(&m).ok_or(IpwError::SingularGram)?;
    let mut inv = factor.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Estimating-equation contributions `(R_i/p̂_i) v_i⁻¹ Z_i e_i` as columns.
fn weighted_scores(afit: &AssociationFit, p_hat: &DVector<f64>, dataset: &AnalysisDataset) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(dataset.p(), dataset.n());
    for i in dataset.respondents() {
        let c = afit.residuals[i] / (p_hat[i] * dataset.v()[i]);
        for k in 0..dataset.p() {
            a[(k, i)] = c * dataset.z()[(i, k)];
        }
    }
    a
}

/// `γ̂ = {Σ_j p̂_j(1−p̂_j) X_j X_jᵀ}⁻¹ Σ_j R_j (1/p̂_j − 1) v_j⁻¹ e_j X_j Z_jᵀ`.
pub fn gamma_hat(afit: &AssociationFit, rfit: &ResponseFit, dataset: &AnalysisDataset) -> Result<DMatrix<f64>> {
    check_consistent(afit, &rfit.p_hat, dataset)?;
    let (q, p) = (dataset.q(), dataset.p());
    let mut right = DMatrix::zeros(q, p);
    for j in dataset.respondents() {
        let pj = rfit.p_hat[j];
        let c = (1.0 / pj - 1.0) * afit.residuals[j] / dataset.v()[j];
        if c == 0.0 {
            continue;
        }
        let xj = dataset.x().row(j).transpose();
        let zj = dataset.z().row(j).transpose();
        right.ger(c, &xj, &zj, 1.0);
    }
    // A vanishing right factor gives γ̂ = 0 regardless of the information
    // matrix, which is singular when every p̂ is 1.
    if right.iter().all(|&e| e == 0.0) {
        return Ok(right);
    }
    let factor = SpdFactor::new(&rfit.info_matrix).ok_or(IpwError::SingularInformation)?;
    Ok(factor.solve(&right))
}

/// Robust sandwich estimator; valid for estimated or known probabilities.
pub fn robust_variance(
    afit: &AssociationFit,
    rfit: &ResponseFit,
    dataset: &AnalysisDataset,
) -> Result<(VarianceEstimate, DMatrix<f64>)> {
    check_consistent(afit, &rfit.p_hat, dataset)?;
    let v = afit.gram_factor.solve(&weighted_scores(afit, &rfit.p_hat, dataset));
    let cov = scaled_outer_sum(&v, finite_sample_factor(dataset.n()));
    Ok((VarianceEstimate::new(EstimatorKind::Robust, cov), v))
}

/// Linearized estimator that accounts for estimating the response model.
pub fn linearized_variance(
    afit: &AssociationFit,
    rfit: &ResponseFit,
    dataset: &AnalysisDataset,
    opts: LinearizedOptions,
) -> Result<(VarianceEstimate, InfluenceDecomposition)> {
    if rfit.source == ProbabilitySource::Known && !opts.allow_known_probabilities {
        return Err(IpwError::KnownProbabilityMisuse);
    }
    let gamma = gamma_hat(afit, rfit, dataset)?;
    let a = weighted_scores(afit, &rfit.p_hat, dataset);

    // (R_i − p̂_i) γ̂ᵀ X_i as columns.
    let mut correction = gamma.tr_mul(&dataset.x().transpose());
    for (i, mut col) in correction.column_iter_mut().enumerate() {
        col *= dataset.r_value(i) - rfit.p_hat[i];
    }

    let u = afit.gram_factor.solve(&(&a - &correction));
    let v = afit.gram_factor.solve(&a);
    let cov = scaled_outer_sum(&u, finite_sample_factor(dataset.n()));
    Ok((
        VarianceEstimate::new(EstimatorKind::Linearized, cov),
        InfluenceDecomposition {
            gamma_hat: gamma,
            u,
            v,
        },
    ))
}

/// All three estimators for an estimated response model, in
/// [`EstimatorKind::ALL`] order.
pub fn all_estimators(
    afit: &AssociationFit,
    rfit: &ResponseFit,
    dataset: &AnalysisDataset,
) -> Result<[VarianceEstimate; 3]> {
    let naive = naive_variance(afit, &rfit.p_hat, dataset)?;
    let (robust, _) = robust_variance(afit, rfit, dataset)?;
    let (lin, _) = linearized_variance(afit, rfit, dataset, LinearizedOptions::default())?;
    Ok([naive, robust, lin])
}
