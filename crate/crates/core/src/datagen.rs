//! Synthetic cohorts for the attrition study.
//!
//! Seven independent standard-normal covariates `z1..z7`;
//! exposure `x = 1 + a(z1 + z2 + z5 + z6) + ε`;
//! outcome `y = 1 + βx + b(z1 + z3 + z5 + z7) + ε′`;
//! response `logit p = γ0 + γ_y y + γ_x x + Σ_{k≤4} γ_k z_k`, `R ~ Bernoulli(p)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AnalysisDataset;
use crate::error::{IpwError, Result};
use crate::linalg::expit;

pub const COVARIATES: usize = 7;

/// Covariates (0-based) entering the exposure equation.
const EXPOSURE_COVARIATES: [usize; 4] = [0, 1, 4, 5];
/// Covariates (0-based) entering the outcome equation.
const OUTCOME_COVARIATES: [usize; 4] = [0, 2, 4, 6];

/// Column of the exposure in the association design `[1, x, z1, z3, z5, z7]`.
pub const EXPOSURE_COLUMN: usize = 1;

/// Names of the association-design columns, intercept first.
pub const ASSOCIATION_COLUMNS: [&str; 6] = ["intercept", "x", "z1", "z3", "z5", "z7"];

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

const DOMAIN_REPLICATE: u64 = 0;
const DOMAIN_CALIBRATION: u64 = 1;

/// Identifies one independent ChaCha stream: `(base seed, scenario, replicate)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub base_seed: u64,
    pub scenario_index: u64,
    pub replicate_index: u64,
}

impl StreamId {
    pub fn new(base_seed: u64, scenario_index: usize, replicate_index: u64) -> Self {
        Self {
            base_seed,
            scenario_index: scenario_index as u64,
            replicate_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        stream_rng(self.base_seed, self.scenario_index, DOMAIN_REPLICATE, self.replicate_index)
    }
}

fn stream_rng(seed: u64, scenario: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&scenario.to_le_bytes());
    key[16..24].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Coefficient derivation
// ---------------------------------------------------------------------------

/// Which outcome covariates the `corr(y, z)` target refers to. `z1` and `z5`
/// also drive the exposure, so their correlation with `y` differs from that of
/// `z3` and `z7`; both cannot hit the same target unless `β a = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeCovariateTarget {
    /// `z3` / `z7`, which reach `y` only directly.
    DirectOnly,
    /// `z1` / `z5`, which reach `y` directly and through `x`.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTargets {
    pub exposure_covariate: f64,
    pub outcome_exposure: f64,
    pub outcome_covariate: f64,
    pub outcome_covariate_target: OutcomeCovariateTarget,
}

impl Default for CorrelationTargets {
    fn default() -> Self {
        Self {
            exposure_covariate: 0.2,
            outcome_exposure: 0.3,
            outcome_covariate: 0.2,
            outcome_covariate_target: OutcomeCovariateTarget::DirectOnly,
        }
    }
}

/// Common exposure coefficient `a` with `corr(x, z_k) = c` for each of the
/// four exposure covariates: `a / √(4a² + 1) = c`.
pub fn derive_exposure_coefficient(target: f64) -> Result<f64> {
    if !target.is_finite() || target.abs() >= 0.5 {
        return Err(IpwError::NoSolution(format!(
            "corr(x, z) = {target} needs |c| < 0.5 with four exposure covariates"
        )));
    }
    Ok(target / (1.0 - 4.0 * target * target).sqrt())
}

/// Population moments of the generating model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeMoments {
    pub var_x: f64,
    pub var_y: f64,
    pub corr_yx: f64,
    /// corr(y, z1) = corr(y, z5).
    pub corr_y_shared: f64,
    /// corr(y, z3) = corr(y, z7).
    pub corr_y_direct: f64,
}

/// Analytic moments for unit noise variances.
pub fn outcome_moments(a: f64, beta: f64, b: f64) -> OutcomeMoments {
    let var_x = 4.0 * a * a + 1.0;
    // Cov(x, z1 + z3 + z5 + z7) = 2a.
    let cov_yx = beta * var_x + 2.0 * a * b;
    let var_y = beta * beta * var_x + 4.0 * b * b + 2.0 * beta * b * (2.0 * a) + 1.0;
    let sd_y = var_y.sqrt();
    OutcomeMoments {
        var_x,
        var_y,
        corr_yx: cov_yx / (sd_y * var_x.sqrt()),
        corr_y_shared: (beta * a + b) / sd_y,
        corr_y_direct: b / sd_y,
    }
}

/// Solves for `(β, b)` matching `corr(y, x)` and `corr(y, z)` by Newton's
/// method on the analytic moment equations.
pub fn derive_outcome_coefficients(a: f64, targets: &CorrelationTargets) -> Result<(f64, f64)> {
    let residual = |beta: f64, b: f64| {
        let m = outcome_moments(a, beta, b);
        let cz = match targets.outcome_covariate_target {
            OutcomeCovariateTarget::DirectOnly => m.corr_y_direct,
            OutcomeCovariateTarget::Shared => m.corr_y_shared,
        };
        [m.corr_yx - targets.outcome_exposure, cz - targets.outcome_covariate]
    };
    let mut beta = targets.outcome_exposure;
    let mut b = targets.outcome_covariate;
    for _ in 0..200 {
        let f = residual(beta, b);
        if f[0].abs().max(f[1].abs()) < 1e-14 {
            return Ok((beta, b));
        }
        let h = 1e-7;
        let fb = residual(beta + h, b);
        let fc = residual(beta, b + h);
        let j = [
            [(fb[0] - f[0]) / h, (fc[0] - f[0]) / h],
            [(fb[1] - f[1]) / h, (fc[1] - f[1]) / h],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            break;
        }
        let d_beta = (j[1][1] * f[0] - j[0][1] * f[1]) / det;
        let d_b = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
        // Damp steps that would overshoot the feasible region.
        let scale = 1.0f64.min(1.0 / d_beta.abs().max(d_b.abs()).max(1e-300));
        beta -= scale * d_beta;
        b -= scale * d_b;
        if !(beta.is_finite() && b.is_finite()) {
            break;
        }
    }
    Err(IpwError::NoSolution(format!(
        "no (β, b) reaches corr(y, x) = {} and corr(y, z) = {} with a = {a}",
        targets.outcome_exposure, targets.outcome_covariate
    )))
}

/// Coefficients of the exposure and outcome equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratingCoefficients {
    pub exposure_intercept: f64,
    /// Common coefficient of z1, z2, z5, z6 in the exposure equation.
    pub exposure_slope: f64,
    pub exposure_noise_sd: f64,
    pub outcome_intercept: f64,
    /// Exposure effect β.
    pub beta: f64,
    /// Common coefficient of z1, z3, z5, z7 in the outcome equation.
    pub outcome_slope: f64,
    pub outcome_noise_sd: f64,
}

impl GeneratingCoefficients {
    pub fn derive(targets: &CorrelationTargets) -> Result<Self> {
        let a = derive_exposure_coefficient(targets.exposure_covariate)?;
        let (beta, b) = derive_outcome_coefficients(a, targets)?;
        Ok(Self {
            exposure_intercept: 1.0,
            exposure_slope: a,
            exposure_noise_sd: 1.0,
            outcome_intercept: 1.0,
            beta,
            outcome_slope: b,
            outcome_noise_sd: 1.0,
        })
    }

    /// True association coefficients in `[1, x, z1, z3, z5, z7]` order.
    pub fn true_beta(&self) -> [f64; 6] {
        let b = self.outcome_slope;
        [self.outcome_intercept, self.beta, b, b, b, b]
    }
}

impl Default for GeneratingCoefficients {
    fn default() -> Self {
        Self::derive(&CorrelationTargets::default()).expect("default targets are feasible")
    }
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    Mar1,
    Mar2,
    Mar3,
    Mnar1,
    Mnar2,
    Mnar3,
    Mnar4,
    Mnar5,
    Mnar6,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::Mar1,
        Scenario::Mar2,
        Scenario::Mar3,
        Scenario::Mnar1,
        Scenario::Mnar2,
        Scenario::Mnar3,
        Scenario::Mnar4,
        Scenario::Mnar5,
        Scenario::Mnar6,
    ];

    pub fn index(self) -> usize {
        Scenario::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Mar1 => "MAR1",
            Scenario::Mar2 => "MAR2",
            Scenario::Mar3 => "MAR3",
            Scenario::Mnar1 => "MNAR1",
            Scenario::Mnar2 => "MNAR2",
            Scenario::Mnar3 => "MNAR3",
            Scenario::Mnar4 => "MNAR4",
            Scenario::Mnar5 => "MNAR5",
            Scenario::Mnar6 => "MNAR6",
        }
    }

    /// `(γ_x, γ_y)` for this row of the scenario table.
    pub fn gammas(self) -> (f64, f64) {
        match self {
            Scenario::Mar1 => (0.0, 0.0),
            Scenario::Mar2 => (0.2, 0.0),
            Scenario::Mar3 => (0.5, 0.0),
            Scenario::Mnar1 => (0.0, 0.2),
            Scenario::Mnar2 => (0.2, 0.2),
            Scenario::Mnar3 => (0.5, 0.2),
            Scenario::Mnar4 => (0.0, 0.5),
            Scenario::Mnar5 => (0.2, 0.5),
            Scenario::Mnar6 => (0.5, 0.5),
        }
    }

    pub fn is_mar(self) -> bool {
        self.gammas().1 == 0.0
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = IpwError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_uppercase();
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.label() == norm)
            .ok_or_else(|| IpwError::UnknownScenario(s.to_string()))
    }
}

pub const DEFAULT_SAMPLE_SIZE: usize = 1000;
pub const DEFAULT_TARGET_RATE: f64 = 0.6;
pub const DEFAULT_CALIBRATION_POPULATION: usize = 1_000_000;
pub const DEFAULT_DERIVATION_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub gamma_z: [f64; 4],
    pub gamma_0: f64,
    pub n: usize,
    pub coefficients: GeneratingCoefficients,
    /// Put the exposure in the fitted response model even when `γ_x = 0`.
    pub force_exposure_in_response: bool,
}

impl ScenarioSpec {
    /// Uncalibrated spec (`γ0 = 0`) with the default generating coefficients.
    pub fn new(scenario: Scenario) -> Self {
        Self::with_coefficients(scenario, GeneratingCoefficients::default())
    }

    pub fn with_coefficients(scenario: Scenario, coefficients: GeneratingCoefficients) -> Self {
        let (gamma_x, gamma_y) = scenario.gammas();
        Self {
            scenario,
            gamma_x,
            gamma_y,
            gamma_z: [0.1; 4],
            gamma_0: 0.0,
            n: DEFAULT_SAMPLE_SIZE,
            coefficients,
            force_exposure_in_response: false,
        }
    }

    /// All nine table rows, uncalibrated.
    pub fn table() -> Vec<ScenarioSpec> {
        let coef = GeneratingCoefficients::default();
        Scenario::ALL
            .into_iter()
            .map(|s| Self::with_coefficients(s, coef))
            .collect()
    }

    pub fn exposure_in_response(&self) -> bool {
        self.gamma_x != 0.0 || self.force_exposure_in_response
    }

    /// Response-model linear predictor without `γ0`.
    fn response_offset(&self, x: f64, y: f64, z: &[f64]) -> f64 {
        let mut eta = self.gamma_y * y + self.gamma_x * x;
        for k in 0..4 {
            eta += self.gamma_z[k] * z[k];
        }
        eta
    }

    /// True response-model coefficients in the fitted design's column order,
    /// when the fitted design contains the true model (γ_y = 0).
    pub fn true_alpha(&self) -> Option<DVector<f64>> {
        if self.gamma_y != 0.0 {
            return None;
        }
        let mut a = vec![self.gamma_0];
        if self.exposure_in_response() {
            a.push(self.gamma_x);
        }
        a.extend_from_slice(&self.gamma_z);
        Some(DVector::from_vec(a))
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeneratedCohort {
    /// n × 7.
    pub z: DMatrix<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub p_true: DVector<f64>,
    pub r: Vec<bool>,
    pub coefficients: GeneratingCoefficients,
}

impl GeneratedCohort {
    pub fn response_rate(&self) -> f64 {
        self.r.iter().filter(|&&r| r).count() as f64 / self.r.len() as f64
    }
}

struct Individual {
    z: [f64; COVARIATES],
    x: f64,
    y: f64,
}

fn draw_individual<R: Rng + ?Sized>(coef: &GeneratingCoefficients, rng: &mut R) -> Individual {
    let mut z = [0.0; COVARIATES];
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let eps: f64 = StandardNormal.sample(rng);
    let eps_out: f64 = StandardNormal.sample(rng);
    let x = coef.exposure_intercept
        + coef.exposure_slope * EXPOSURE_COVARIATES.iter().map(|&k| z[k]).sum::<f64>()
        + coef.exposure_noise_sd * eps;
    let y = coef.outcome_intercept
        + coef.beta * x
        + coef.outcome_slope * OUTCOME_COVARIATES.iter().map(|&k| z[k]).sum::<f64>()
        + coef.outcome_noise_sd * eps_out;
    Individual { z, x, y }
}

/// Draws a cohort of `spec.n` individuals from `rng`.
pub fn generate_cohort<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> GeneratedCohort {
    let n = spec.n;
    let mut z = DMatrix::zeros(n, COVARIATES);
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut p_true = DVector::zeros(n);
    let mut r = Vec::with_capacity(n);
    for i in 0..n {
        let ind = draw_individual(&spec.coefficients, rng);
        let p = expit(spec.gamma_0 + spec.response_offset(ind.x, ind.y, &ind.z));
        let u: f64 = rng.random();
        for k in 0..COVARIATES {
            z[(i, k)] = ind.z[k];
        }
        x[i] = ind.x;
        y[i] = ind.y;
        p_true[i] = p;
        r.push(u < p);
    }
    GeneratedCohort {
        z,
        x,
        y,
        p_true,
        r,
        coefficients: spec.coefficients,
    }
}

/// Cohort drawn from the stream `(seed, scenario, 0)`.
pub fn generate_cohort_seeded(spec: &ScenarioSpec, seed: u64) -> GeneratedCohort {
    generate_cohort(spec, &mut StreamId::new(seed, spec.scenario.index(), 0).rng())
}

/// Response design `[1, (x), z1, z2, z3, z4]`; `x` only when it enters the
/// response mechanism. `y` never enters: it is missing for nonrespondents.
pub fn response_design(spec: &ScenarioSpec, cohort: &GeneratedCohort) -> DMatrix<f64> {
    let with_x = spec.exposure_in_response();
    let q = if with_x { 6 } else { 5 };
    DMatrix::from_fn(cohort.x.len(), q, |i, j| match (with_x, j) {
        (_, 0) => 1.0,
        (true, 1) => cohort.x[i],
        (true, j) => cohort.z[(i, j - 2)],
        (false, j) => cohort.z[(i, j - 1)],
    })
}

/// Association design `[1, x, z1, z3, z5, z7]`.
pub fn association_design(cohort: &GeneratedCohort) -> DMatrix<f64> {
    DMatrix::from_fn(cohort.x.len(), 6, |i, j| match j {
        0 => 1.0,
        1 => cohort.x[i],
        j => cohort.z[(i, OUTCOME_COVARIATES[j - 2])],
    })
}

/// Builds the analysis dataset whose response and association models match
/// the generating process (minus `y` in the response model).
pub fn to_analysis_dataset(cohort: &GeneratedCohort, spec: &ScenarioSpec) -> Result<AnalysisDataset> {
    let y = DVector::from_fn(cohort.y.len(), |i, _| {
        if cohort.r[i] {
            cohort.y[i]
        } else {
            f64::NAN
        }
    });
    AnalysisDataset::new(
        response_design(spec, cohort),
        association_design(cohort),
        y,
        cohort.r.clone(),
        None,
    )
}

// ---------------------------------------------------------------------------
// γ0 calibration
// ---------------------------------------------------------------------------

const CALIBRATION_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gamma_0: f64,
    /// Mean response probability over the calibration population at `gamma_0`.
    pub achieved_rate: f64,
    pub derivation_seed: u64,
    pub population: usize,
}

/// Linear predictors (without γ0) for a fresh calibration population.
fn calibration_offsets(spec: &ScenarioSpec, seed: u64, population: usize) -> Vec<Vec<f64>> {
    let chunks = population.div_ceil(CALIBRATION_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CALIBRATION_CHUNK.min(population - c * CALIBRATION_CHUNK);
            let mut rng = stream_rng(seed, spec.scenario.index() as u64, DOMAIN_CALIBRATION, c as u64);
            (0..len)
                .map(|_| {
                    let ind = draw_individual(&spec.coefficients, &mut rng);
                    spec.response_offset(ind.x, ind.y, &ind.z)
                })
                .collect()
        })
        .collect()
}

fn mean_response(offsets: &[Vec<f64>], gamma_0: f64, population: usize) -> f64 {
    let partial: Vec<f64> = offsets
        .par_iter()
        .map(|chunk| chunk.iter().map(|&e| expit(gamma_0 + e)).sum::<f64>())
        .collect();
    partial.iter().sum::<f64>() / population as f64
}

/// Finds `γ0` so that the mean true response probability over a calibration
/// population equals `target_rate`, by bisection on `[−10, 10]`.
pub fn calibrate_gamma0(
    spec: &ScenarioSpec,
    target_rate: f64,
    derivation_seed: u64,
    population: usize,
) -> Result<Calibration> {
    let (mut lo, mut hi) = (-10.0, 10.0);
    if !(target_rate > 0.0 && target_rate < 1.0) || population == 0 {
        return Err(IpwError::BracketFailure { lo, hi });
    }
    let offsets = calibration_offsets(spec, derivation_seed, population);
    let rate = |g: f64| mean_response(&offsets, g, population);
    if rate(lo) > target_rate || rate(hi) < target_rate {
        return Err(IpwError::BracketFailure { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma_0 = 0.5 * (lo + hi);
    Ok(Calibration {
        gamma_0,
        achieved_rate: rate(gamma_0),
        derivation_seed,
        population,
    })
}

/// A calibrated scenario together with the provenance of its `γ0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedScenario {
    pub spec: ScenarioSpec,
    pub calibration: Calibration,
    pub target_rate: f64,
}

/// Calibrates every spec independently (and in parallel).
pub fn calibrate_all(
    specs: &[ScenarioSpec],
    target_rate: f64,
    derivation_seed: u64,
    population: usize,
) -> Result<Vec<CalibratedScenario>> {
    specs
        .par_iter()
        .map(|spec| {
            let calibration = calibrate_gamma0(spec, target_rate, derivation_seed, population)?;
            Ok(CalibratedScenario {
                spec: ScenarioSpec {
                    gamma_0: calibration.gamma_0,
                    ..*spec
                },
                calibration,
                target_rate,
            })
        })
        .collect()
}

/// Pearson correlation of two equal-length samples.
pub fn sample_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}
