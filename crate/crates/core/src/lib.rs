//! Inverse-probability weighting for unit attrition in cohort studies.
//!
//! A logistic response model is fitted on fully observed baseline covariates,
//! respondents are weighted by `1/p̂`, and the weighted linear association
//! model comes with three variance estimators: naive, robust (sandwich) and
//! linearized (sandwich with a correction for the estimated weights). The
//! [`datagen`] and [`harness`] modules reproduce a nine-scenario MAR/MNAR
//! simulation comparing the three.

pub mod association;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod response;
pub mod variance;

pub use association::{fit_weighted_linear, AssociationFit};
pub use dataset::AnalysisDataset;
pub use error::{IpwError, Result};
pub use response::{
    fit_response, ipw_weights, linearized_weight_approx, FitOptions, ProbabilitySource, ResponseFit,
};
pub use variance::{
    gamma_hat, linearized_variance, naive_variance, naive_variance_literal, robust_variance,
    EstimatorKind, InfluenceDecomposition, LinearizedOptions, VarianceEstimate,
};
