//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ipw_core::datagen::*;
use ipw_core::harness::*;
use ipw_core::{
    fit_response, fit_weighted_linear, linearized_variance, naive_variance, robust_variance,
    AnalysisDataset, EstimatorKind, FitOptions, LinearizedOptions, ResponseFit,
};
use nalgebra::{DMatrix, DVector};
use oracle::{Mat, OracleInput};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 1;
const REPLICATES: usize = 10_000;
const RUNTIME_BUDGET: Duration = Duration::from_secs(15 * 60);
const NAIVE_RB_MAX: f64 = -0.05;
const UNBIASED_BAND: f64 = 0.05;
const SIMILARITY_BAND: f64 = 0.05;
const RATE_RANGE: (f64, f64) = (0.59, 0.61);
const MOMENT_POPULATION: usize = 1_000_000;
const MOMENT_BAND: f64 = 0.005;
const ORACLE_DRAWS: usize = 1000;
const ORACLE_MAX_N: usize = 20;
const ORACLE_REL_TOL: f64 = 1e-10;
const EXACT_FIT_ABS_TOL: f64 = 1e-20;
const MORE_NEGATIVE_THAN_MAR1: [Scenario; 4] =
    [Scenario::Mnar3, Scenario::Mnar4, Scenario::Mnar5, Scenario::Mnar6];

struct Verdict {
    criterion: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rb(report: &SimulationReport, s: Scenario, k: EstimatorKind) -> f64 {
    report
        .cell(s, k)
        .and_then(|c| c.relative_bias)
        .unwrap_or(f64::NAN)
}

fn full_grid() -> (SimulationReport, Duration) {
    let start = Instant::now();
    let specs: Vec<ScenarioSpec> = calibrate_all(
        &ScenarioSpec::table(),
        DEFAULT_TARGET_RATE,
        DEFAULT_DERIVATION_SEED,
        DEFAULT_CALIBRATION_POPULATION,
    )
    .expect("calibration")
    .into_iter()
    .map(|c| c.spec)
    .collect();
    let config = StudyConfig::new(REPLICATES, SEED);
    let report = build_report(&run_study(&specs, &config));
    (report, start.elapsed())
}

fn print_grid(report: &SimulationReport) {
    println!("scenario   rate    RB_naive  RB_robust  RB_lin   n_fail");
    for s in Scenario::ALL {
        let summary = report.summary(s).unwrap();
        println!(
            "{:<9} {:.4}  {:+.4}   {:+.4}    {:+.4}  {}",
            s.label(),
            summary.mean_response_rate,
            rb(report, s, EstimatorKind::Naive),
            rb(report, s, EstimatorKind::Robust),
            rb(report, s, EstimatorKind::Linearized),
            summary.n_fail + summary.n_fail_reference
        );
    }
}

fn naive_underestimation(report: &SimulationReport, elapsed: Duration) -> Verdict {
    let mut problems = Vec::new();
    let mar1 = rb(report, Scenario::Mar1, EstimatorKind::Naive);
    for s in Scenario::ALL {
        let v = rb(report, s, EstimatorKind::Naive);
        if !(v < NAIVE_RB_MAX) {
            problems.push(format!("{s} RB {v:+.4} not below {NAIVE_RB_MAX}"));
        }
    }
    for s in MORE_NEGATIVE_THAN_MAR1 {
        let v = rb(report, s, EstimatorKind::Naive);
        if !(v < mar1) {
            problems.push(format!("{s} RB {v:+.4} not below MAR1 {mar1:+.4}"));
        }
    }
    if elapsed > RUNTIME_BUDGET {
        problems.push(format!("grid took {:.0}s", elapsed.as_secs_f64()));
    }
    Verdict {
        criterion: 1,
        name: "naive underestimation",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("max RB {:+.4}; MAR1 {mar1:+.4}; grid {:.0}s", max_rb(report, EstimatorKind::Naive), elapsed.as_secs_f64())
        } else {
            problems.join("; ")
        },
    }
}

fn max_rb(report: &SimulationReport, k: EstimatorKind) -> f64 {
    Scenario::ALL
        .iter()
        .map(|&s| rb(report, s, k))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn approximate_unbiasedness(report: &SimulationReport) -> Verdict {
    let mut problems = Vec::new();
    let mut worst = 0.0f64;
    for s in Scenario::ALL {
        for k in [EstimatorKind::Robust, EstimatorKind::Linearized] {
            let v = rb(report, s, k);
            worst = worst.max(v.abs());
            if !(v.abs() < UNBIASED_BAND) {
                problems.push(format!("{s} {k} RB {v:+.4}"));
            }
        }
    }
    Verdict {
        criterion: 2,
        name: "robust/linearized unbiasedness",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("max |RB| {worst:.4} < {UNBIASED_BAND}")
        } else {
            format!("|RB| >= {UNBIASED_BAND}: {}", problems.join("; "))
        },
    }
}

fn robust_linearized_similarity(report: &SimulationReport) -> Verdict {
    let mut worst = (0.0f64, Scenario::Mar1);
    for s in Scenario::ALL {
        let d = (rb(report, s, EstimatorKind::Robust) - rb(report, s, EstimatorKind::Linearized)).abs();
        if !(d <= worst.0) {
            worst = (d, s);
        }
    }
    Verdict {
        criterion: 3,
        name: "robust/linearized similarity",
        pass: worst.0 < SIMILARITY_BAND,
        detail: format!("max |RB_rob - RB_lin| {:.4} ({})", worst.0, worst.1),
    }
}

fn response_rate(report: &SimulationReport) -> Verdict {
    let rates: Vec<(Scenario, f64)> = Scenario::ALL
        .iter()
        .map(|&s| (s, report.summary(s).unwrap().mean_response_rate))
        .collect();
    let bad: Vec<String> = rates
        .iter()
        .filter(|(_, r)| !(*r >= RATE_RANGE.0 && *r <= RATE_RANGE.1))
        .map(|(s, r)| format!("{s} {r:.4}"))
        .collect();
    let lo = rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = rates.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    Verdict {
        criterion: 4,
        name: "calibrated response rate",
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("rates in [{lo:.4}, {hi:.4}]")
        } else {
            bad.join("; ")
        },
    }
}

fn generator_moments() -> Verdict {
    let spec = ScenarioSpec {
        n: MOMENT_POPULATION,
        ..ScenarioSpec::new(Scenario::Mar1)
    };
    let cohort = generate_cohort_seeded(&spec, SEED);
    let x: Vec<f64> = cohort.x.iter().copied().collect();
    let y: Vec<f64> = cohort.y.iter().copied().collect();
    let z = |k: usize| -> Vec<f64> { cohort.z.column(k).iter().copied().collect() };
    let checks = [
        ("corr(x,z1)", sample_correlation(&x, &z(0)), 0.2),
        ("corr(y,x)", sample_correlation(&y, &x), 0.3),
        ("corr(y,z3)", sample_correlation(&y, &z(2)), 0.2),
    ];
    let pass = checks.iter().all(|(_, v, t)| (v - t).abs() <= MOMENT_BAND);
    Verdict {
        criterion: 5,
        name: "generator moments",
        pass,
        detail: checks
            .iter()
            .map(|(n, v, _)| format!("{n}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

struct Draw {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
    r: Vec<bool>,
    v: DVector<f64>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw(rng: &mut ChaCha8Rng) -> Draw {
    let n = rng.random_range(8..=ORACLE_MAX_N);
    let q = rng.random_range(1..=3usize);
    let p = rng.random_range(1..=3usize);
    let x = DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { normal(rng) });
    let z = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(rng) });
    let y = DVector::from_fn(n, |_, _| 1.0 + 2.0 * normal(rng));
    let mut r: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    for flag in r.iter_mut().take(p + 2) {
        *flag = true;
    }
    r[n - 1] = false;
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
    Draw { x, z, y, r, v }
}

fn to_mat(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn flat_dm(m: &DMatrix<f64>) -> Vec<f64> {
    flat(&to_mat(m))
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let (mut estimated, mut known) = (0, 0);
    let mut errors = Vec::new();
    for d in 0..ORACLE_DRAWS {
        let dr = draw(&mut rng);
        let ds = AnalysisDataset::new(dr.x.clone(), dr.z.clone(), dr.y.clone(), dr.r.clone(), Some(dr.v.clone()))
            .expect("valid draw");
        let rfit = match fit_response(&ds, &FitOptions::default()) {
            Ok(f) => {
                estimated += 1;
                f
            }
            Err(_) => {
                known += 1;
                let p = DVector::from_fn(ds.n(), |_, _| rng.random_range(0.2..0.95));
                ResponseFit::from_known_probabilities(&ds, p).unwrap()
            }
        };
        let afit = match fit_weighted_linear(&ds, &rfit.p_hat) {
            Ok(a) => a,
            Err(e) => {
                errors.push(format!("draw {d}: {e}"));
                continue;
            }
        };
        let opts = LinearizedOptions {
            allow_known_probabilities: true,
        };
        let naive = naive_variance(&afit, &rfit.p_hat, &ds).unwrap();
        let (robust, v) = robust_variance(&afit, &rfit, &ds).unwrap();
        let (lin, dec) = linearized_variance(&afit, &rfit, &ds, opts).unwrap();
        let o = oracle::estimate(&OracleInput {
            x: &to_mat(&dr.x),
            z: &to_mat(&dr.z),
            y: dr.y.as_slice(),
            r: &dr.r,
            v: dr.v.as_slice(),
            p: rfit.p_hat.as_slice(),
        });
        let pairs = [
            (afit.beta_hat.as_slice().to_vec(), o.beta.clone()),
            (flat_dm(&dec.u.transpose()), flat(&o.u)),
            (flat_dm(&v.transpose()), flat(&o.v)),
            (flat_dm(&naive.cov), flat(&o.naive)),
            (flat_dm(&robust.cov), flat(&o.robust)),
            (flat_dm(&lin.cov), flat(&o.linearized)),
        ];
        for (got, want) in &pairs {
            worst = worst.max(oracle::rel_err(got, want));
        }
        worst = worst.max(oracle::rel_err_scaled(
            &flat_dm(&dec.gamma_hat),
            &flat(&o.gamma),
            &flat(&o.gamma_scale),
        ));
    }
    Verdict {
        criterion: 6,
        name: "oracle equivalence",
        pass: worst <= ORACLE_REL_TOL && errors.is_empty(),
        detail: format!(
            "{ORACLE_DRAWS} draws ({estimated} estimated, {known} known p), max rel err {worst:.2e}{}",
            if errors.is_empty() { String::new() } else { format!("; {}", errors.join("; ")) }
        ),
    }
}

fn degeneracy_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xD6E8_FEB8_6659_FD93);
    let opts = LinearizedOptions {
        allow_known_probabilities: true,
    };
    let mut problems = Vec::new();
    let mut worst_exact_fit = 0.0f64;
    for d in 0..ORACLE_DRAWS {
        let dr = draw(&mut rng);
        let base = AnalysisDataset::new(dr.x.clone(), dr.z.clone(), dr.y.clone(), dr.r.clone(), Some(dr.v.clone()))
            .unwrap();
        let ones = ResponseFit::from_known_probabilities(&base, DVector::from_element(base.n(), 1.0)).unwrap();
        let afit = fit_weighted_linear(&base, &ones.p_hat).unwrap();
        let (rob, _) = robust_variance(&afit, &ones, &base).unwrap();
        let (lin, _) = linearized_variance(&afit, &ones, &base, opts).unwrap();
        if rob.cov != lin.cov {
            problems.push(format!("draw {d}: p=1 covariances differ"));
        }

        let p = DVector::from_fn(base.n(), |_, _| rng.random_range(0.2..0.95));
        let zero_y = DVector::zeros(base.n());
        let exact_y = &dr.z * DVector::from_fn(dr.z.ncols(), |_, _| normal(&mut rng));
        for (label, y) in [("zero outcome", zero_y), ("exact fit", exact_y)] {
            let ds = AnalysisDataset::new(dr.x.clone(), dr.z.clone(), y, dr.r.clone(), Some(dr.v.clone())).unwrap();
            let rfit = ResponseFit::from_known_probabilities(&ds, p.clone()).unwrap();
            let afit = fit_weighted_linear(&ds, &rfit.p_hat).unwrap();
            let (rob, _) = robust_variance(&afit, &rfit, &ds).unwrap();
            let (lin, _) = linearized_variance(&afit, &rfit, &ds, opts).unwrap();
            let size = rob.cov.amax().max(lin.cov.amax());
            if label == "zero outcome" {
                if size != 0.0 {
                    problems.push(format!("draw {d}: {label} gives non-zero covariance"));
                }
            } else {
                worst_exact_fit = worst_exact_fit.max(size);
                if size > EXACT_FIT_ABS_TOL {
                    problems.push(format!("draw {d}: {label} covariance {size:.1e}"));
                }
            }
        }
    }
    Verdict {
        criterion: 7,
        name: "degeneracy identities",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{ORACLE_DRAWS} draws; exact-fit max |cov| {worst_exact_fit:.1e}")
        } else {
            problems.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    }
}

fn ipwvar(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ipwvar"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(out.stdout)
}

fn determinism() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let cohort = dir.path().join("cohort.csv");
    let spec = ScenarioSpec {
        gamma_0: 0.4,
        ..ScenarioSpec::new(Scenario::Mnar3)
    };
    std::fs::write(&cohort, ipw_cli::io::cohort_csv(&generate_cohort_seeded(&spec, SEED))).unwrap();
    let cohort = cohort.to_str().unwrap().to_string();
    let fit = [
        "fit", "--data", &cohort, "--response-indicator", "R", "--outcome", "y",
        "--response-covariates", "x,z1,z2,z3,z4", "--assoc-covariates", "x,z1,z3,z5,z7",
        "--estimator", "all",
    ];
    let simulate = |threads: &'static str| {
        vec![
            "simulate", "--scenario", "all", "--reps", "200", "--seed", "1",
            "--population", "100000", "--parallelism", threads,
        ]
    };
    let calibrate = |threads: &'static str| {
        vec!["calibrate", "--population", "100000", "--parallelism", threads]
    };
    let groups: Vec<(&str, Vec<Vec<&str>>)> = vec![
        ("fit", vec![fit.to_vec(), fit.to_vec()]),
        ("simulate", vec![simulate("1"), simulate("1"), simulate("4")]),
        ("calibrate", vec![calibrate("1"), calibrate("3")]),
    ];
    let mut problems = Vec::new();
    for (name, runs) in &groups {
        let outputs: Vec<Result<Vec<u8>, String>> = runs.iter().map(|a| ipwvar(a)).collect();
        match outputs.iter().find_map(|o| o.as_ref().err()) {
            Some(e) => problems.push(format!("{name} failed: {}", e.trim())),
            None => {
                let first = outputs[0].as_ref().unwrap();
                if outputs.iter().any(|o| o.as_ref().unwrap() != first) {
                    problems.push(format!("{name} output differs"));
                }
            }
        }
    }
    Verdict {
        criterion: 8,
        name: "determinism",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "fit, simulate (1 and 4 threads) and calibrate byte-identical".into()
        } else {
            problems.join("; ")
        },
    }
}

fn main() -> ExitCode {
    let (report, elapsed) = full_grid();
    print_grid(&report);
    let verdicts = [
        naive_underestimation(&report, elapsed),
        approximate_unbiasedness(&report),
        robust_linearized_similarity(&report),
        response_rate(&report),
        generator_moments(),
        oracle_equivalence(),
        degeneracy_identities(),
        determinism(),
    ];
    for v in &verdicts {
        println!(
            "criterion {} {:<32} {}  {}",
            v.criterion,
            v.name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
