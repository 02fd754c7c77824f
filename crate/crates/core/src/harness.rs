//! Monte-Carlo study: replicate fits, an independent reference run for the
//! true sampling variance, and relative bias of each variance estimator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::fit_weighted_linear;
use crate::datagen::{
    generate_cohort, to_analysis_dataset, Scenario, ScenarioSpec, StreamId, EXPOSURE_COLUMN,
};
use crate::error::{IpwError, Result};
use crate::response::{fit_response, FitOptions};
use crate::variance::{all_estimators, EstimatorKind};

/// Share of failed replicates above which a scenario is flagged invalid.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;
pub const DEFAULT_REPLICATES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    /// Replicates whose variance estimates are evaluated.
    Estimate,
    /// Independent replicates giving the reference sampling variance.
    Reference,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Estimate => "estimate",
            RunKind::Reference => "reference",
        }
    }
}

/// Successful replicate output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub beta_hat: Vec<f64>,
    /// Diagonal of each covariance estimate, in [`EstimatorKind::ALL`] order.
    pub variances: [Vec<f64>; 3],
    pub response_iterations: usize,
    pub clamp_count: usize,
}

impl ReplicateFit {
    pub fn variance(&self, kind: EstimatorKind, coef: usize) -> f64 {
        self.variances[kind as usize][coef]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub cause: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: Scenario,
    pub run: RunKind,
    pub replicate: u64,
    pub seed: u64,
    pub response_rate: f64,
    pub outcome: std::result::Result<ReplicateFit, ReplicateFailure>,
}

impl ReplicateRecord {
    pub fn fit(&self) -> Option<&ReplicateFit> {
        self.outcome.as_ref().ok()
    }
}

fn fit_replicate(spec: &ScenarioSpec, stream: StreamId) -> (f64, Result<ReplicateFit>) {
    let cohort = generate_cohort(spec, &mut stream.rng());
    let rate = cohort.response_rate();
    let fit = (|| {
        let dataset = to_analysis_dataset(&cohort, spec)?;
        let rfit = fit_response(&dataset, &FitOptions::default())?;
        let afit = fit_weighted_linear(&dataset, &rfit.p_hat)?;
        let est = all_estimators(&afit, &rfit, &dataset)?;
        Ok(ReplicateFit {
            beta_hat: afit.beta_hat.iter().copied().collect(),
            variances: est.map(|e| e.cov.diagonal().iter().copied().collect()),
            response_iterations: rfit.iterations,
            clamp_count: rfit.clamp_count,
        })
    })();
    (rate, fit)
}

/// One replicate: generate, fit the response model, fit the weighted
/// regression and compute all three variance estimates. Failures are
/// captured in the record.
pub fn run_replicate(spec: &ScenarioSpec, run: RunKind, replicate: u64, base_seed: u64) -> ReplicateRecord {
    let stream = StreamId::new(base_seed, spec.scenario.index(), replicate);
    let (response_rate, fit) = fit_replicate(spec, stream);
    ReplicateRecord {
        scenario: spec.scenario,
        run,
        replicate,
        seed: base_seed,
        response_rate,
        outcome: fit.map_err(|e| ReplicateFailure {
            cause: e.cause().to_string(),
            message: e.to_string(),
        }),
    }
}

fn pool(parallelism: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool")
}

/// `b` replicates of one scenario; the result is in replicate order whatever
/// the parallelism.
pub fn run_scenario(
    spec: &ScenarioSpec,
    run: RunKind,
    b: usize,
    base_seed: u64,
    parallelism: usize,
) -> Vec<ReplicateRecord> {
    pool(parallelism).install(|| {
        (0..b as u64)
            .into_par_iter()
            .map(|r| run_replicate(spec, run, r, base_seed))
            .collect()
    })
}

/// Sample variance with denominator `len − 1`; `None` with fewer than two values.
pub fn empirical_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Empirical variance of each coefficient over the successful records.
pub fn reference_from_records(records: &[ReplicateRecord]) -> Vec<Option<f64>> {
    let fits: Vec<&ReplicateFit> = records.iter().filter_map(|r| r.fit()).collect();
    let p = fits.first().map_or(0, |f| f.beta_hat.len());
    (0..p)
        .map(|k| empirical_variance(&fits.iter().map(|f| f.beta_hat[k]).collect::<Vec<_>>()))
        .collect()
}

/// Runs `b_ref` fresh replicates under `seed` and returns the per-coefficient
/// empirical variance of `β̂`.
pub fn reference_variance(spec: &ScenarioSpec, b_ref: usize, seed: u64, parallelism: usize) -> Vec<Option<f64>> {
    reference_from_records(&run_scenario(spec, RunKind::Reference, b_ref, seed, parallelism))
}

/// `(mean_v − v_ref) / v_ref`.
pub fn relative_bias(mean_v: f64, v_ref: f64) -> Result<f64> {
    if v_ref == 0.0 {
        return Err(IpwError::ZeroReference);
    }
    Ok((mean_v - v_ref) / v_ref)
}

/// Seed for the reference run when the caller does not pick one.
pub fn default_reference_seed(base_seed: u64) -> u64 {
    // splitmix64 finalizer: distinct from base_seed for every input.
    let mut z = base_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub reference_replicates: usize,
    pub base_seed: u64,
    pub reference_seed: u64,
    pub parallelism: usize,
}

impl StudyConfig {
    pub fn new(replicates: usize, base_seed: u64) -> Self {
        Self {
            replicates,
            reference_replicates: replicates,
            base_seed,
            reference_seed: default_reference_seed(base_seed),
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Estimate and reference runs for every spec. Records come back sorted by
/// (scenario, run, replicate).
pub fn run_study(specs: &[ScenarioSpec], config: &StudyConfig) -> Vec<ReplicateRecord> {
    let mut jobs = Vec::new();
    for spec in specs {
        for r in 0..config.replicates as u64 {
            jobs.push((spec, RunKind::Estimate, r, config.base_seed));
        }
        for r in 0..config.reference_replicates as u64 {
            jobs.push((spec, RunKind::Reference, r, config.reference_seed));
        }
    }
    let mut records: Vec<ReplicateRecord> = pool(config.parallelism).install(|| {
        jobs.into_par_iter()
            .map(|(spec, run, r, seed)| run_replicate(spec, run, r, seed))
            .collect()
    });
    sort_records(&mut records);
    records
}

pub fn sort_records(records: &mut [ReplicateRecord]) {
    records.sort_by_key(|r| (r.scenario, r.run, r.seed, r.replicate));
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One cell of the scenario × estimator grid for a single coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub scenario: Scenario,
    pub estimator: EstimatorKind,
    /// Index into the association design.
    pub coefficient: usize,
    pub mean_v: f64,
    pub v_ref: Option<f64>,
    pub relative_bias: Option<f64>,
    pub n_fail: usize,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub replicates: usize,
    pub reference_replicates: usize,
    pub n_fail: usize,
    pub n_fail_reference: usize,
    pub mean_response_rate: f64,
    pub mean_beta: Vec<f64>,
    pub sd_beta: Vec<f64>,
    /// False when failures exceed [`MAX_FAILURE_FRACTION`] in either run.
    pub valid: bool,
    pub failure_causes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenarios: Vec<ScenarioSummary>,
    /// Every coefficient × estimator × scenario.
    pub cells: Vec<ReportCell>,
    pub base_seed: u64,
    pub reference_seed: Option<u64>,
}

impl SimulationReport {
    /// Cells for the exposure coefficient: one per scenario and estimator.
    pub fn exposure_cells(&self) -> impl Iterator<Item = &ReportCell> {
        self.cells.iter().filter(|c| c.coefficient == EXPOSURE_COLUMN)
    }

    pub fn cell(&self, scenario: Scenario, estimator: EstimatorKind) -> Option<&ReportCell> {
        self.exposure_cells()
            .find(|c| c.scenario == scenario && c.estimator == estimator)
    }

    pub fn summary(&self, scenario: Scenario) -> Option<&ScenarioSummary> {
        self.scenarios.iter().find(|s| s.scenario == scenario)
    }

    pub fn is_valid(&self) -> bool {
        self.scenarios.iter().all(|s| s.valid)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Aggregates replicate records into the relative-bias grid. Only scenarios
/// present in `records` appear. The result does not depend on record order.
pub fn build_report(records: &[ReplicateRecord]) -> SimulationReport {
    let mut sorted: Vec<&ReplicateRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.scenario, r.run, r.seed, r.replicate));

    let mut by_scenario: BTreeMap<Scenario, (Vec<&ReplicateRecord>, Vec<&ReplicateRecord>)> =
        BTreeMap::new();
    for r in sorted {
        let entry = by_scenario.entry(r.scenario).or_default();
        match r.run {
            RunKind::Estimate => entry.0.push(r),
            RunKind::Reference => entry.1.push(r),
        }
    }

    let base_seed = records
        .iter()
        .find(|r| r.run == RunKind::Estimate)
        .map_or(0, |r| r.seed);
    let reference_seed = records
        .iter()
        .find(|r| r.run == RunKind::Reference)
        .map(|r| r.seed);

    let mut scenarios = Vec::new();
    let mut cells = Vec::new();
    for (scenario, (est, reference)) in by_scenario {
        let fits: Vec<&ReplicateFit> = est.iter().filter_map(|r| r.fit()).collect();
        let ref_records: Vec<ReplicateRecord> = reference.iter().map(|&r| r.clone()).collect();
        let v_ref = reference_from_records(&ref_records);
        let n_fail = est.len() - fits.len();
        let n_fail_reference = reference.iter().filter(|r| r.fit().is_none()).count();
        let p = fits.first().map_or(0, |f| f.beta_hat.len());

        let mut failure_causes = BTreeMap::new();
        for r in est.iter().chain(reference.iter()) {
            if let Err(f) = &r.outcome {
                *failure_causes.entry(f.cause.clone()).or_insert(0) += 1;
            }
        }

        let mean_beta: Vec<f64> = (0..p).map(|k| mean(fits.iter().map(|f| f.beta_hat[k]))).collect();
        let sd_beta: Vec<f64> = (0..p)
            .map(|k| {
                empirical_variance(&fits.iter().map(|f| f.beta_hat[k]).collect::<Vec<_>>())
                    .map_or(f64::NAN, f64::sqrt)
            })
            .collect();
        let too_many = |fail: usize, total: usize| {
            total > 0 && fail as f64 > MAX_FAILURE_FRACTION * total as f64
        };
        scenarios.push(ScenarioSummary {
            scenario,
            replicates: est.len(),
            reference_replicates: reference.len(),
            n_fail,
            n_fail_reference,
            mean_response_rate: mean(est.iter().map(|r| r.response_rate)),
            mean_beta,
            sd_beta,
            valid: !too_many(n_fail, est.len()) && !too_many(n_fail_reference, reference.len()),
            failure_causes,
        });

        for coefficient in 0..p {
            for estimator in EstimatorKind::ALL {
                let mean_v = mean(fits.iter().map(|f| f.variance(estimator, coefficient)));
                let vr = v_ref.get(coefficient).copied().flatten();
                cells.push(ReportCell {
                    scenario,
                    estimator,
                    coefficient,
                    mean_v,
                    v_ref: vr,
                    relative_bias: vr.and_then(|v| relative_bias(mean_v, v).ok()),
                    n_fail,
                    replicates: est.len(),
                    seed: base_seed,
                });
            }
        }
    }

    SimulationReport {
        scenarios,
        cells,
        base_seed,
        reference_seed,
    }
}
