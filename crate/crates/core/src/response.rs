//! Logistic response model: solves the logistic score equation
//! `Σ_i X_i (R_i − expit(X_iᵀα)) = 0` by safeguarded Newton–Raphson and turns
//! the fitted probabilities into inverse-probability weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::AnalysisDataset;
use crate::error::{IpwError, Result};
use crate::linalg::{expit, full_column_rank, symmetrize, SpdFactor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on the max-norm of the score.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Step halvings allowed when a Newton step lowers the log-likelihood.
    pub max_halvings: usize,
    /// Fitted probabilities are clamped to `[clamp, 1 − clamp]`.
    pub clamp: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            max_halvings: 20,
            clamp: 1e-10,
        }
    }
}

/// Where the response probabilities came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbabilitySource {
    /// Fitted by [`fit_response`].
    Estimated,
    /// Supplied by the caller and treated as known.
    Known,
}

#[derive(Debug, Clone)]
pub struct ResponseFit {
    /// Logistic coefficients; empty for known probabilities.
    pub alpha_hat: DVector<f64>,
    pub p_hat: DVector<f64>,
    /// `Σ_j p̂_j (1 − p̂_j) X_j X_jᵀ`.
    pub info_matrix: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    /// Number of probabilities moved onto the clamp boundary.
    pub clamp_count: usize,
    pub source: ProbabilitySource,
}

impl ResponseFit {
    /// Wraps externally known response probabilities. Entries must lie in (0, 1].
    pub fn from_known_probabilities(dataset: &AnalysisDataset, p: DVector<f64>) -> Result<Self> {
        if p.len() != dataset.n() {
            return Err(IpwError::DimensionMismatch(format!(
                "{} probabilities for {} rows",
                p.len(),
                dataset.n()
            )));
        }
        if let Some((row, &value)) = p
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0 && v <= 1.0))
        {
            return Err(IpwError::InvalidProbability { row, value });
        }
        let info_matrix = information(dataset.x(), &p);
        let score = score(dataset, &p);
        Ok(Self {
            alpha_hat: DVector::zeros(0),
            p_hat: p,
            info_matrix,
            converged: true,
            iterations: 0,
            final_gradient_norm: score.amax(),
            clamp_count: 0,
            source: ProbabilitySource::Known,
        })
    }

    pub fn weights(&self) -> DVector<f64> {
        self.p_hat.map(|p| 1.0 / p)
    }
}

/// `Σ_i X_i (R_i − p_i)`.
fn score(dataset: &AnalysisDataset, p: &DVector<f64>) -> DVector<f64> {
    let resid = DVector::from_fn(dataset.n(), |i, _| dataset.r_value(i) - p[i]);
    dataset.x().tr_mul(&resid)
}

/// `Σ_i p_i (1 − p_i) X_i X_iᵀ`.
fn information(x: &DMatrix<f64>, p: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= p[i] * (1.0 - p[i]);
    }
    let mut info = x.tr_mul(&weighted);
    symmetrize(&mut info);
    info
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn log_likelihood(dataset: &AnalysisDataset, eta: &DVector<f64>) -> f64 {
    eta.iter()
        .enumerate()
        .map(|(i, &e)| dataset.r_value(i) * e - softplus(e))
        .sum()
}

/// Fits the logistic response model by Newton–Raphson on the score equation.
pub fn fit_response(dataset: &AnalysisDataset, opts: &FitOptions) -> Result<ResponseFit> {
    let n = dataset.n();
    let respondents = dataset.respondent_count();
    if respondents == 0 || respondents == n {
        return Err(IpwError::DegenerateResponse { respondents, n });
    }
    let x = dataset.x();
    if !full_column_rank(x) {
        return Err(IpwError::RankDeficientDesign);
    }

    let mut alpha = DVector::zeros(dataset.q());
    if x.column(0).iter().all(|&v| v == 1.0) {
        let rate = respondents as f64 / n as f64;
        alpha[0] = (rate / (1.0 - rate)).ln();
    }

    let mut eta = x * &alpha;
    let mut ll = log_likelihood(dataset, &eta);
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let p = eta.map(expit);
        let g = score(dataset, &p);
        grad_norm = g.amax();
        let info = information(x, &p);
        let factor = match SpdFactor::new(&info) {
            Some(f) => f,
            // An information matrix that was fine at the start and collapses
            // later means the probabilities are saturating: separation.
            None if iterations > 0 => {
                return Err(IpwError::NonConvergence {
                    iterations,
                    gradient_norm: grad_norm,
                    coef_norm: alpha.norm(),
                })
            }
            None => return Err(IpwError::SingularInformation),
        };
        let step = factor.solve_vec(&g);

        // Under separation the score can be tiny while the Newton step stays
        // O(1); only accept convergence once the step has vanished as well.
        if grad_norm <= opts.tolerance && step.amax() <= 1e-6 * (1.0 + alpha.amax()) {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(IpwError::NonConvergence {
                iterations,
                gradient_norm: grad_norm,
                coef_norm: alpha.norm(),
            });
        }

        let mut t = 1.0;
        let mut candidate = &alpha + &step;
        let mut cand_eta = x * &candidate;
        let mut cand_ll = log_likelihood(dataset, &cand_eta);
        let slack = 1e-12 * ll.abs().max(1.0);
        let mut halvings = 0;
        while !(cand_ll >= ll - slack) && halvings < opts.max_halvings {
            t *= 0.5;
            halvings += 1;
            candidate = &alpha + &step * t;
            cand_eta = x * &candidate;
            cand_ll = log_likelihood(dataset, &cand_eta);
        }
        alpha = candidate;
        eta = cand_eta;
        ll = cand_ll;
        iterations += 1;
    }

    let lo = opts.clamp;
    let hi = 1.0 - opts.clamp;
    let mut clamp_count = 0;
    let p_hat = eta.map(|e| {
        let p = expit(e);
        if p < lo {
            clamp_count += 1;
            lo
        } else if p > hi {
            clamp_count += 1;
            hi
        } else {
            p
        }
    });
    let info_matrix = information(x, &p_hat);
    Ok(ResponseFit {
        alpha_hat: alpha,
        p_hat,
        info_matrix,
        converged: true,
        iterations,
        final_gradient_norm: grad_norm,
        clamp_count,
        source: ProbabilitySource::Estimated,
    })
}

/// Inverse-probability weights `1 / p̂_i` for every individual.
pub fn ipw_weights(fit: &ResponseFit, dataset: &AnalysisDataset) -> Result<DVector<f64>> {
    if fit.p_hat.len() != dataset.n() {
        return Err(IpwError::DimensionMismatch(
            "fit and dataset row counts differ".into(),
        ));
    }
    Ok(fit.weights())
}

/// First-order expansion of `1/p̂_i` around the true probabilities `p*`:
///
/// `1/p*_i − (1/p*_i − 1) X_iᵀ {Σ_j p*_j(1−p*_j) X_j X_jᵀ}⁻¹ Σ_j (R_j − p*_j) X_j`.
///
/// Only used to check the approximation behind the linearized variance.
pub fn linearized_weight_approx(
    p_star: &DVector<f64>,
    x: &DMatrix<f64>,
    r: &[bool],
) -> Result<DVector<f64>> {
    let n = r.len();
    if p_star.len() != n || x.nrows() != n {
        return Err(IpwError::DimensionMismatch(
            "p_star, x and r must have the same length".into(),
        ));
    }
    if let Some((row, &value)) = p_star
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0 && p < 1.0))
    {
        return Err(IpwError::InvalidProbability { row, value });
    }
    let info = information(x, p_star);
    let factor = SpdFactor::new(&info).ok_or(IpwError::SingularInformation)?;
    let resid = DVector::from_fn(n, |i, _| if r[i] { 1.0 } else { 0.0 } - p_star[i]);
    let shift = factor.solve_vec(&x.tr_mul(&resid));
    let lin = x * shift;
    Ok(DVector::from_fn(n, |i, _| {
        let w = 1.0 / p_star[i];
        w - (w - 1.0) * lin[i]
    }))
}
