//! Weighted linear association model fitted on respondents with weights
//! `R_i / (p̂_i v_i)`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::AnalysisDataset;
use crate::error::{IpwError, Result};
use crate::linalg::{symmetrize, SpdFactor};

#[derive(Debug, Clone)]
pub struct AssociationFit {
    pub beta_hat: DVector<f64>,
    /// `Y_i − Z_iᵀβ̂` for respondents, `NaN` for nonrespondents.
    pub residuals: DVector<f64>,
    /// Weighted residual variance with a degrees-of-freedom correction.
    /// Only the naive estimator reads it.
    pub sigma2_hat: f64,
    /// `Σ_i (R_i/p̂_i) v_i⁻¹ Z_i Z_iᵀ`.
    pub gram: DMatrix<f64>,
    pub(crate) gram_factor: SpdFactor,
}

impl AssociationFit {
    /// Max-norm of the weighted normal equations at `β̂`.
    pub fn normal_equation_residual(&self, dataset: &AnalysisDataset, p_hat: &DVector<f64>) -> f64 {
        let mut acc = DVector::zeros(dataset.p());
        for i in dataset.respondents() {
            let w = 1.0 / (p_hat[i] * dataset.v()[i]);
            acc += dataset.z().row(i).transpose() * (w * self.residuals[i]);
        }
        acc.amax()
    }
}

fn check_probabilities(dataset: &AnalysisDataset, p_hat: &DVector<f64>) -> Result<()> {
    if p_hat.len() != dataset.n() {
        return Err(IpwError::DimensionMismatch(format!(
            "{} probabilities for {} rows",
            p_hat.len(),
            dataset.n()
        )));
    }
    for i in dataset.respondents() {
        if !(p_hat[i] > 0.0 && p_hat[i].is_finite()) {
            return Err(IpwError::InvalidProbability {
                row: i,
                value: p_hat[i],
            });
        }
    }
    Ok(())
}

/// `Σ_i (R_i/p̂_i) v_i⁻¹ Z_i Z_iᵀ`, summed over respondents.
pub fn weighted_gram(dataset: &AnalysisDataset, p_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_probabilities(dataset, p_hat)?;
    let p = dataset.p();
    let mut gram = DMatrix::zeros(p, p);
    for i in dataset.respondents() {
        let zi = dataset.z().row(i).transpose();
        let w = 1.0 / (p_hat[i] * dataset.v()[i]);
        gram.ger(w, &zi, &zi, 1.0);
    }
    symmetrize(&mut gram);
    Ok(gram)
}

/// Solves `Σ_i (R_i/p̂_i) v_i⁻¹ Z_i (Y_i − Z_iᵀβ) = 0` for `β`.
pub fn fit_weighted_linear(dataset: &AnalysisDataset, p_hat: &DVector<f64>) -> Result<AssociationFit> {
    let gram = weighted_gram(dataset, p_hat)?;
    let gram_factor = SpdFactor::new(&gram).ok_or(IpwError::SingularGram)?;

    let mut cross = DVector::zeros(dataset.p());
    for i in dataset.respondents() {
        let w = 1.0 / (p_hat[i] * dataset.v()[i]);
        cross.axpy(w * dataset.y()[i], &dataset.z().row(i).transpose(), 1.0);
    }
    let beta_hat = gram_factor.solve_vec(&cross);

    let mut residuals = DVector::from_element(dataset.n(), f64::NAN);
    let mut sse = 0.0;
    let mut weight_total = 0.0;
    for i in dataset.respondents() {
        let e = dataset.y()[i] - dataset.z().row(i).dot(&beta_hat.transpose());
        residuals[i] = e;
        let w = 1.0 / p_hat[i];
        sse += w * e * e / dataset.v()[i];
        weight_total += w;
    }
    let dof = weight_total - dataset.p() as f64;
    let sigma2_hat = if dof > 0.0 { sse / dof } else { f64::NAN };

    Ok(AssociationFit {
        beta_hat,
        residuals,
        sigma2_hat,
        gram,
        gram_factor,
    })
}
