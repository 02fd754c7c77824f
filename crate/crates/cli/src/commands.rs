//! The four subcommands. Each returns the text of its output files so that
//! callers (and tests) decide where they go.

use std::fmt::Write as _;
use std::path::PathBuf;

use ipw_core::datagen::{
    calibrate_all, CalibratedScenario, ScenarioSpec, DEFAULT_CALIBRATION_POPULATION,
    DEFAULT_DERIVATION_SEED, DEFAULT_TARGET_RATE,
};
use ipw_core::harness::{
    build_report, default_reference_seed, run_study, SimulationReport, StudyConfig,
    DEFAULT_REPLICATES,
};
use ipw_core::variance::{linearized_variance, naive_variance, robust_variance, EstimatorKind};
use ipw_core::{fit_response, fit_weighted_linear, FitOptions, LinearizedOptions};

use crate::config::{column_mapping, estimators, scenarios, Command, Flags};
use crate::error::{CliError, Result};
use crate::io::{self, fmt_f64};

pub const DEFAULT_SEED: u64 = 1;

/// A file to write; `None` means stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub path: Option<PathBuf>,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub outputs: Vec<Output>,
    /// Human-oriented notes for stderr.
    pub notes: Vec<String>,
    /// False when the run produced results flagged invalid.
    pub success: bool,
}

pub fn execute(command: Command, flags: &Flags) -> Result<CommandResult> {
    match command {
        Command::Fit => cmd_fit(flags),
        Command::Simulate => cmd_simulate(flags),
        Command::Calibrate => cmd_calibrate(flags),
        Command::Report => cmd_report(flags),
    }
}

/// Writes every output, stdout ones included.
pub fn write_outputs(result: &CommandResult) -> Result<()> {
    for o in &result.outputs {
        match &o.path {
            Some(p) => io::write_file(p, &o.contents)?,
            None => print!("{}", o.contents),
        }
    }
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn cmd_fit(flags: &Flags) -> Result<CommandResult> {
    let data = flags
        .data
        .clone()
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let mapping = column_mapping(flags)?;
    let kinds = estimators(flags)?;
    let parsed = io::parse_dataset_file(&data, &mapping)?;
    let d = &parsed.dataset;

    let rfit = fit_response(d, &FitOptions::default())?;
    let afit = fit_weighted_linear(d, &rfit.p_hat)?;
    let mut ses = Vec::new();
    for &kind in &kinds {
        let est = match kind {
            EstimatorKind::Naive => naive_variance(&afit, &rfit.p_hat, d)?,
            EstimatorKind::Robust => robust_variance(&afit, &rfit, d)?.0,
            EstimatorKind::Linearized => {
                linearized_variance(&afit, &rfit, d, LinearizedOptions::default())?.0
            }
        };
        ses.push(est.se);
    }

    let resp_weights: Vec<f64> = d.respondents().map(|i| 1.0 / rfit.p_hat[i]).collect();
    let wmin = resp_weights.iter().copied().fold(f64::INFINITY, f64::min);
    let wmax = resp_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut out = String::new();
    let _ = writeln!(out, "# command=fit");
    let _ = writeln!(out, "# data={}", data.display());
    let _ = writeln!(out, "# response-indicator={}", mapping.response_indicator);
    let _ = writeln!(out, "# outcome={}", mapping.outcome);
    let _ = writeln!(out, "# response-covariates={}", join(&mapping.response_covariates));
    let _ = writeln!(out, "# assoc-covariates={}", join(&mapping.assoc_covariates));
    let _ = writeln!(
        out,
        "# variance-structure={}",
        mapping.variance_structure.as_deref().unwrap_or("none")
    );
    let _ = writeln!(out, "# estimator={}", join(&kinds));
    let _ = writeln!(out, "# n={} respondents={}", d.n(), d.respondent_count());
    let _ = writeln!(
        out,
        "# response-model converged={} iterations={} score-norm={:e} clamp-count={}",
        rfit.converged, rfit.iterations, rfit.final_gradient_norm, rfit.clamp_count
    );
    for (name, a) in parsed.response_names.iter().zip(rfit.alpha_hat.iter()) {
        let _ = writeln!(out, "# alpha.{name}={}", fmt_f64(*a));
    }
    let _ = writeln!(out, "# weight-min={} weight-max={}", fmt_f64(wmin), fmt_f64(wmax));

    out.push_str("coefficient,estimate");
    for k in &kinds {
        let _ = write!(out, ",se_{k}");
    }
    out.push('\n');
    for (j, name) in parsed.assoc_names.iter().enumerate() {
        let _ = write!(out, "{name},{}", fmt_f64(afit.beta_hat[j]));
        for se in &ses {
            let _ = write!(out, ",{}", fmt_f64(se[j]));
        }
        out.push('\n');
    }

    Ok(CommandResult {
        outputs: vec![Output {
            path: flags.out.clone(),
            contents: out,
        }],
        notes: vec![],
        success: true,
    })
}

/// Calibrated specs for the selected scenarios, from `--registry` or computed.
fn scenario_registry(flags: &Flags) -> Result<Vec<CalibratedScenario>> {
    let wanted = scenarios(flags)?;
    let entries = match &flags.registry {
        Some(path) => {
            let all = io::read_registry(io::open(path)?)?;
            wanted
                .iter()
                .map(|s| {
                    all.iter()
                        .find(|e| e.spec.scenario == *s)
                        .copied()
                        .ok_or_else(|| CliError::Config(format!("registry has no {s}")))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let force = flags.include_exposure.unwrap_or(false);
            let specs: Vec<ScenarioSpec> = ScenarioSpec::table()
                .into_iter()
                .filter(|s| wanted.contains(&s.scenario))
                .map(|s| ScenarioSpec {
                    force_exposure_in_response: force,
                    ..s
                })
                .collect();
            calibrate_all(
                &specs,
                flags.target_rate.unwrap_or(DEFAULT_TARGET_RATE),
                flags.derivation_seed.unwrap_or(DEFAULT_DERIVATION_SEED),
                flags.population.unwrap_or(DEFAULT_CALIBRATION_POPULATION),
            )?
        }
    };
    Ok(entries)
}

fn registry_provenance(entries: &[CalibratedScenario]) -> Vec<(String, String)> {
    entries
        .iter()
        .map(|e| {
            (
                format!("gamma_0.{}", e.spec.scenario),
                format!(
                    "{} (target={} derivation-seed={} population={} exposure-in-response={})",
                    fmt_f64(e.spec.gamma_0),
                    fmt_f64(e.target_rate),
                    e.calibration.derivation_seed,
                    e.calibration.population,
                    e.spec.exposure_in_response()
                ),
            )
        })
        .collect()
}

fn report_outputs(
    report: &SimulationReport,
    flags: &Flags,
    pairs: &[(&str, String)],
) -> Vec<Output> {
    let mut outputs = vec![Output {
        path: flags.out.clone(),
        contents: io::report_csv(report, pairs),
    }];
    if let Some(p) = &flags.extended {
        outputs.push(Output {
            path: Some(p.clone()),
            contents: io::extended_report_csv(report, pairs),
        });
    }
    if let Some(p) = &flags.summary {
        outputs.push(Output {
            path: Some(p.clone()),
            contents: io::summary_csv(report, pairs),
        });
    }
    outputs
}

fn invalid_notes(report: &SimulationReport) -> Vec<String> {
    report
        .scenarios
        .iter()
        .filter(|s| !s.valid)
        .map(|s| {
            format!(
                "{}: {} of {} estimate and {} of {} reference replicates failed; report flagged invalid",
                s.scenario, s.n_fail, s.replicates, s.n_fail_reference, s.reference_replicates
            )
        })
        .collect()
}

pub fn cmd_simulate(flags: &Flags) -> Result<CommandResult> {
    let registry = scenario_registry(flags)?;
    let reps = flags.reps.unwrap_or(DEFAULT_REPLICATES);
    let seed = flags.seed.unwrap_or(DEFAULT_SEED);
    if reps == 0 {
        return Err(CliError::Config("--reps must be at least 1".into()));
    }
    let mut config = StudyConfig::new(reps, seed);
    config.reference_replicates = flags.ref_reps.unwrap_or(reps);
    config.reference_seed = flags.ref_seed.unwrap_or_else(|| default_reference_seed(seed));
    if config.reference_seed == seed {
        return Err(CliError::Config(
            "--ref-seed must differ from --seed".into(),
        ));
    }
    if let Some(p) = flags.parallelism {
        config.parallelism = p.max(1);
    }

    let specs: Vec<ScenarioSpec> = registry.iter().map(|e| e.spec).collect();
    let records = run_study(&specs, &config);
    let report = build_report(&records);

    let labels: Vec<String> = specs.iter().map(|s| s.scenario.to_string()).collect();
    let registry_pairs = registry_provenance(&registry);
    let mut pairs: Vec<(&str, String)> = vec![
        ("command", "simulate".into()),
        ("scenario", join(&labels)),
        ("reps", reps.to_string()),
        ("ref-reps", config.reference_replicates.to_string()),
        ("seed", seed.to_string()),
        ("ref-seed", config.reference_seed.to_string()),
        ("n", join(&specs.iter().map(|s| s.n).collect::<Vec<_>>())),
    ];
    pairs.extend(registry_pairs.iter().map(|(k, v)| (k.as_str(), v.clone())));

    let mut outputs = report_outputs(&report, flags, &pairs);
    if let Some(p) = &flags.records {
        outputs.push(Output {
            path: Some(p.clone()),
            contents: io::records_csv(&records, &pairs),
        });
    }
    let mut notes = vec![format!(
        "seed={seed} ref-seed={} reps={reps} ref-reps={}",
        config.reference_seed, config.reference_replicates
    )];
    notes.extend(invalid_notes(&report));
    Ok(CommandResult {
        outputs,
        notes,
        success: report.is_valid(),
    })
}

pub fn cmd_calibrate(flags: &Flags) -> Result<CommandResult> {
    let seed = flags.seed.unwrap_or(DEFAULT_DERIVATION_SEED);
    let flags = Flags {
        derivation_seed: Some(seed),
        registry: None,
        ..flags.clone()
    };
    let entries = scenario_registry(&flags)?;
    let target = flags.target_rate.unwrap_or(DEFAULT_TARGET_RATE);
    let population = flags.population.unwrap_or(DEFAULT_CALIBRATION_POPULATION);
    let pairs = [
        ("command", "calibrate".to_string()),
        ("target-rate", fmt_f64(target)),
        ("seed", seed.to_string()),
        ("population", population.to_string()),
    ];
    Ok(CommandResult {
        outputs: vec![Output {
            path: flags.out.clone(),
            contents: io::registry_csv(&entries, &pairs),
        }],
        notes: vec![format!("derivation seed {seed}")],
        success: true,
    })
}

pub fn cmd_report(flags: &Flags) -> Result<CommandResult> {
    let path = flags
        .records
        .clone()
        .ok_or_else(|| CliError::Config("--records is required".into()))?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let records = io::read_records(text.as_bytes())?;
    let report = build_report(&records);
    // Provenance is carried over from the records file.
    let carried: Vec<(String, String)> = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let pairs: Vec<(&str, String)> = carried.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    Ok(CommandResult {
        outputs: report_outputs(&report, flags, &pairs),
        notes: invalid_notes(&report),
        success: report.is_valid(),
    })
}
