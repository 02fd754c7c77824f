//! Command-line flags, the optional TOML config file, and their merge.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ipw_core::datagen::Scenario;
use ipw_core::variance::EstimatorKind;
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::io::ColumnMapping;

#[derive(Debug, Parser)]
#[command(
    name = "ipwvar",
    version,
    about = "Inverse-probability weighting for cohort attrition: fitting, variance estimation and the MAR/MNAR simulation study"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit a cohort file with IPW and report coefficients and standard errors.
    Fit,
    /// Run the Monte-Carlo study and write the relative-bias table.
    Simulate,
    /// Calibrate the response-model intercept of every scenario.
    Calibrate,
    /// Re-aggregate saved replicate records into a report.
    Report,
}

/// Every option; each may also come from the config file. Flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Flags {
    /// TOML file with any of these options (kebab-case keys).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Input cohort file (comma-delimited with header).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,

    /// Column holding the 0/1 response indicator.
    #[arg(long, global = true)]
    pub response_indicator: Option<String>,

    /// Outcome column.
    #[arg(long, global = true)]
    pub outcome: Option<String>,

    /// Response-model covariates, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub response_covariates: Option<Vec<String>>,

    /// Association-model covariates, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub assoc_covariates: Option<Vec<String>>,

    /// Optional column with the known variance structure v_i.
    #[arg(long, global = true)]
    pub variance_structure: Option<String>,

    /// naive | robust | linearized | all, or a comma list.
    #[arg(long, global = true)]
    pub estimator: Option<String>,

    /// Scenario label (MAR1..MAR3, MNAR1..MNAR6), a comma list, or "all".
    #[arg(long, global = true)]
    pub scenario: Option<String>,

    /// Replicates per scenario.
    #[arg(long, global = true)]
    pub reps: Option<usize>,

    /// Replicates of the independent reference run (defaults to --reps).
    #[arg(long, global = true)]
    pub ref_reps: Option<usize>,

    /// Base seed (derivation seed for `calibrate`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Seed of the reference run (derived from --seed by default).
    #[arg(long, global = true)]
    pub ref_seed: Option<u64>,

    /// Worker threads for the simulation.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    /// Main output file (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Replicate-record file: written by `simulate`, read by `report`.
    #[arg(long, global = true)]
    pub records: Option<PathBuf>,

    /// Per-coefficient report file.
    #[arg(long, global = true)]
    pub extended: Option<PathBuf>,

    /// Per-scenario diagnostics file.
    #[arg(long, global = true)]
    pub summary: Option<PathBuf>,

    /// Calibrated scenario registry to use instead of calibrating on the fly.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,

    /// Target mean response rate for calibration.
    #[arg(long, global = true)]
    pub target_rate: Option<f64>,

    /// Seed of the calibration population used by `simulate`.
    #[arg(long, global = true)]
    pub derivation_seed: Option<u64>,

    /// Size of the calibration population.
    #[arg(long, global = true)]
    pub population: Option<usize>,

    /// Put the exposure in the fitted response model in every scenario.
    #[arg(long, global = true)]
    pub include_exposure: Option<bool>,
}

macro_rules! prefer {
    ($flags:ident, $file:ident, $($field:ident),*) => {
        Flags {
            config: $flags.config.clone(),
            $($field: $flags.$field.clone().or($file.$field.clone()),)*
        }
    };
}

impl Flags {
    /// Fills options absent on the command line from `file`.
    pub fn merged_with(&self, file: &Flags) -> Flags {
        prefer!(
            self, file, data, response_indicator, outcome, response_covariates, assoc_covariates,
            variance_structure, estimator, scenario, reps, ref_reps, seed, ref_seed, parallelism,
            out, records, extended, summary, registry, target_rate, derivation_seed, population,
            include_exposure
        )
    }

    pub fn from_toml(text: &str) -> Result<Flags> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Flags> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies the config file named by `--config`, if any.
    pub fn resolve(self) -> Result<Flags> {
        match &self.config {
            Some(path) => Ok(self.merged_with(&Self::load(path)?)),
            None => Ok(self),
        }
    }
}

fn require<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

/// Column roles for `fit`, checked for overlaps.
pub fn column_mapping(flags: &Flags) -> Result<ColumnMapping> {
    let mapping = ColumnMapping {
        response_indicator: require(&flags.response_indicator, "response-indicator")?,
        outcome: require(&flags.outcome, "outcome")?,
        response_covariates: flags.response_covariates.clone().unwrap_or_default(),
        assoc_covariates: require(&flags.assoc_covariates, "assoc-covariates")?,
        variance_structure: flags.variance_structure.clone(),
    };
    validate_mapping(&mapping)?;
    Ok(mapping)
}

pub fn validate_mapping(m: &ColumnMapping) -> Result<()> {
    let err = |msg: String| Err(CliError::Config(msg));
    if m.response_covariates.contains(&m.outcome) {
        return err(format!("outcome {:?} cannot be a response covariate", m.outcome));
    }
    if m.assoc_covariates.contains(&m.outcome) {
        return err(format!("outcome {:?} cannot be an association covariate", m.outcome));
    }
    if m.outcome == m.response_indicator
        || m.response_covariates.contains(&m.response_indicator)
        || m.assoc_covariates.contains(&m.response_indicator)
    {
        return err(format!(
            "response indicator {:?} cannot play another role",
            m.response_indicator
        ));
    }
    if let Some(v) = &m.variance_structure {
        if v == &m.outcome || v == &m.response_indicator {
            return err(format!("variance structure {v:?} cannot be the outcome or indicator"));
        }
    }
    for list in [&m.response_covariates, &m.assoc_covariates] {
        for (i, c) in list.iter().enumerate() {
            if list[..i].contains(c) {
                return err(format!("column {c:?} listed twice"));
            }
        }
    }
    Ok(())
}

/// Estimators in canonical order; `all` expands to the three of them.
pub fn estimators(flags: &Flags) -> Result<Vec<EstimatorKind>> {
    let raw = flags.estimator.as_deref().unwrap_or("all");
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend(EstimatorKind::ALL);
        } else {
            out.push(part.parse().map_err(CliError::Config)?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Config("no estimator selected".into()));
    }
    Ok(out)
}

/// Scenarios in table order; `all` (the default) expands to all nine.
pub fn scenarios(flags: &Flags) -> Result<Vec<Scenario>> {
    let raw = flags.scenario.as_deref().unwrap_or("all");
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part.eq_ignore_ascii_case("all") {
            out.extend(Scenario::ALL);
        } else {
            out.push(part.parse()?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Config("no scenario selected".into()));
    }
    Ok(out)
}
