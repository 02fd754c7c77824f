//! Comma-delimited readers and writers: input cohorts, the scenario registry,
//! replicate records and the relative-bias report.
//!
//! Output files start with `#` comment lines carrying the provenance needed
//! to rerun them; readers skip those lines. Missing values are written as
//! `NA` and read from either `NA` or an empty field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use ipw_core::datagen::{
    CalibratedScenario, Calibration, GeneratedCohort, GeneratingCoefficients, Scenario, ScenarioSpec,
    ASSOCIATION_COLUMNS, COVARIATES,
};
use ipw_core::harness::{ReplicateFailure, ReplicateFit, ReplicateRecord, RunKind, SimulationReport};
use ipw_core::variance::EstimatorKind;
use ipw_core::AnalysisDataset;
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Which input columns play which role.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ColumnMapping {
    pub response_indicator: String,
    pub outcome: String,
    pub response_covariates: Vec<String>,
    pub assoc_covariates: Vec<String>,
    pub variance_structure: Option<String>,
}

/// A parsed input file together with the coefficient names of each design.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub dataset: AnalysisDataset,
    pub response_names: Vec<String>,
    pub assoc_names: Vec<String>,
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:?}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("NA")
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| CliError::NonNumeric {
        row,
        column: column.to_string(),
        value: field.to_string(),
    })
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

pub fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Reads a delimited cohort file. Intercept columns are prepended to both
/// designs; the input must not contain them.
pub fn parse_dataset<R: Read>(input: R, mapping: &ColumnMapping) -> Result<ParsedDataset> {
    let mut rdr = reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    };
    let r_col = col(&mapping.response_indicator)?;
    let y_col = col(&mapping.outcome)?;
    let x_cols = mapping
        .response_covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let z_cols = mapping
        .assoc_covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let v_col = mapping.variance_structure.as_deref().map(col).transpose()?;

    let mut r = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut v = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 1;
        let field = |c: usize| rec.get(c).unwrap_or("");

        let r_raw = field(r_col);
        let responded = match r_raw.trim() {
            "1" | "1.0" => true,
            "0" | "0.0" => false,
            _ => {
                return Err(CliError::InvalidIndicator {
                    row,
                    value: r_raw.to_string(),
                })
            }
        };
        r.push(responded);

        x.push(1.0);
        for (&c, name) in x_cols.iter().zip(&mapping.response_covariates) {
            if is_missing(field(c)) {
                return Err(CliError::MissingInResponseCovariate {
                    row,
                    column: name.clone(),
                });
            }
            x.push(parse_number(field(c), row, name)?);
        }

        // Outcome, association covariates and variance structure are only
        // required for respondents.
        let optional = |c: usize, name: &str| -> Result<f64> {
            if is_missing(field(c)) {
                if responded {
                    Err(CliError::MissingInRespondent {
                        row,
                        column: name.to_string(),
                    })
                } else {
                    Ok(f64::NAN)
                }
            } else {
                parse_number(field(c), row, name)
            }
        };
        y.push(optional(y_col, &mapping.outcome)?);
        z.push(1.0);
        for (&c, name) in z_cols.iter().zip(&mapping.assoc_covariates) {
            z.push(optional(c, name)?);
        }
        if let (Some(c), Some(name)) = (v_col, mapping.variance_structure.as_deref()) {
            v.push(optional(c, name)?);
        }
    }

    let n = r.len();
    let q = x_cols.len() + 1;
    let p = z_cols.len() + 1;
    let dataset = AnalysisDataset::new(
        DMatrix::from_row_slice(n, q, &x),
        DMatrix::from_row_slice(n, p, &z),
        DVector::from_vec(y),
        r,
        v_col.map(|_| DVector::from_vec(v)),
    )?;
    let with_intercept = |names: &[String]| {
        std::iter::once("intercept".to_string())
            .chain(names.iter().cloned())
            .collect()
    };
    Ok(ParsedDataset {
        dataset,
        response_names: with_intercept(&mapping.response_covariates),
        assoc_names: with_intercept(&mapping.assoc_covariates),
    })
}

pub fn parse_dataset_file(path: &Path, mapping: &ColumnMapping) -> Result<ParsedDataset> {
    parse_dataset(open(path)?, mapping)
}

fn provenance(out: &mut String, pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k}={v}");
    }
}

/// Writes a generated cohort with columns `R,y,x,z1..z7`; `y` is `NA` for
/// nonrespondents.
pub fn cohort_csv(cohort: &GeneratedCohort) -> String {
    let mut out = String::from("R,y,x");
    for k in 1..=COVARIATES {
        let _ = write!(out, ",z{k}");
    }
    out.push('\n');
    for i in 0..cohort.r.len() {
        let y = if cohort.r[i] { fmt_f64(cohort.y[i]) } else { "NA".into() };
        let _ = write!(out, "{},{},{}", u8::from(cohort.r[i]), y, fmt_f64(cohort.x[i]));
        for k in 0..COVARIATES {
            let _ = write!(out, ",{}", fmt_f64(cohort.z[(i, k)]));
        }
        out.push('\n');
    }
    out
}

/// Column mapping matching [`ipw_core::datagen::to_analysis_dataset`] for a
/// file written by [`cohort_csv`].
pub fn cohort_mapping(spec: &ScenarioSpec) -> ColumnMapping {
    let mut response = Vec::new();
    if spec.exposure_in_response() {
        response.push("x".to_string());
    }
    response.extend((1..=4).map(|k| format!("z{k}")));
    ColumnMapping {
        response_indicator: "R".into(),
        outcome: "y".into(),
        response_covariates: response,
        assoc_covariates: ASSOCIATION_COLUMNS[1..].iter().map(|s| s.to_string()).collect(),
        variance_structure: None,
    }
}

// ---------------------------------------------------------------------------
// Scenario registry
// ---------------------------------------------------------------------------

const REGISTRY_HEADER: &str = "scenario,gamma_x,gamma_y,gamma_z1,gamma_z2,gamma_z3,gamma_z4,gamma_0,n,\
target_rate,achieved_rate,derivation_seed,population,exposure_intercept,exposure_slope,\
exposure_noise_sd,outcome_intercept,beta,outcome_slope,outcome_noise_sd,force_exposure_in_response";

pub fn registry_csv(entries: &[CalibratedScenario], provenance_pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    provenance(&mut out, provenance_pairs);
    out.push_str(REGISTRY_HEADER);
    out.push('\n');
    for e in entries {
        let s = &e.spec;
        let c = &s.coefficients;
        let fields = [
            s.scenario.label().to_string(),
            fmt_f64(s.gamma_x),
            fmt_f64(s.gamma_y),
            fmt_f64(s.gamma_z[0]),
            fmt_f64(s.gamma_z[1]),
            fmt_f64(s.gamma_z[2]),
            fmt_f64(s.gamma_z[3]),
            fmt_f64(s.gamma_0),
            s.n.to_string(),
            fmt_f64(e.target_rate),
            fmt_f64(e.calibration.achieved_rate),
            e.calibration.derivation_seed.to_string(),
            e.calibration.population.to_string(),
            fmt_f64(c.exposure_intercept),
            fmt_f64(c.exposure_slope),
            fmt_f64(c.exposure_noise_sd),
            fmt_f64(c.outcome_intercept),
            fmt_f64(c.beta),
            fmt_f64(c.outcome_slope),
            fmt_f64(c.outcome_noise_sd),
            s.force_exposure_in_response.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn malformed(kind: &'static str, message: impl Into<String>) -> CliError {
    CliError::Malformed {
        kind,
        message: message.into(),
    }
}

/// Named-column access to one record of a headed CSV.
struct Row<'a> {
    kind: &'static str,
    header: &'a csv::StringRecord,
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn get(&self, name: &str) -> Result<&str> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(self.kind, format!("missing column {name}")))?;
        self.rec
            .get(idx)
            .ok_or_else(|| malformed(self.kind, format!("short row for {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.header.iter().any(|h| h == name)
    }

    fn f64(&self, name: &str) -> Result<f64> {
        let raw = self.get(name)?;
        if is_missing(raw) {
            return Ok(f64::NAN);
        }
        raw.parse()
            .map_err(|_| malformed(self.kind, format!("{name}: bad number {raw:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let raw = self.get(name)?;
        raw.parse()
            .map_err(|_| malformed(self.kind, format!("{name}: bad value {raw:?}")))
    }
}

pub fn read_registry<R: Read>(input: R) -> Result<Vec<CalibratedScenario>> {
    let mut rdr = reader(input);
    let header = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = Row {
            kind: "registry",
            header: &header,
            rec: &rec,
        };
        let scenario: Scenario = row.get("scenario")?.parse()?;
        let coefficients = GeneratingCoefficients {
            exposure_intercept: row.f64("exposure_intercept")?,
            exposure_slope: row.f64("exposure_slope")?,
            exposure_noise_sd: row.f64("exposure_noise_sd")?,
            outcome_intercept: row.f64("outcome_intercept")?,
            beta: row.f64("beta")?,
            outcome_slope: row.f64("outcome_slope")?,
            outcome_noise_sd: row.f64("outcome_noise_sd")?,
        };
        let spec = ScenarioSpec {
            scenario,
            gamma_x: row.f64("gamma_x")?,
            gamma_y: row.f64("gamma_y")?,
            gamma_z: [
                row.f64("gamma_z1")?,
                row.f64("gamma_z2")?,
                row.f64("gamma_z3")?,
                row.f64("gamma_z4")?,
            ],
            gamma_0: row.f64("gamma_0")?,
            n: row.parse("n")?,
            coefficients,
            force_exposure_in_response: row.has("force_exposure_in_response")
                && row.parse("force_exposure_in_response")?,
        };
        out.push(CalibratedScenario {
            spec,
            calibration: Calibration {
                gamma_0: spec.gamma_0,
                achieved_rate: row.f64("achieved_rate")?,
                derivation_seed: row.parse("derivation_seed")?,
                population: row.parse("population")?,
            },
            target_rate: row.f64("target_rate")?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Replicate records
// ---------------------------------------------------------------------------

pub fn records_csv(records: &[ReplicateRecord], provenance_pairs: &[(&str, String)]) -> String {
    let p = records
        .iter()
        .find_map(|r| r.fit())
        .map_or(0, |f| f.beta_hat.len());
    let mut out = String::new();
    provenance(&mut out, provenance_pairs);
    out.push_str("scenario,run,replicate,seed,response_rate,status,cause,message,iterations,clamp_count");
    for k in 0..p {
        let _ = write!(out, ",beta_{k}");
    }
    for kind in EstimatorKind::ALL {
        for k in 0..p {
            let _ = write!(out, ",var_{kind}_{k}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.scenario,
            r.run.as_str(),
            r.replicate,
            r.seed,
            fmt_f64(r.response_rate)
        );
        match &r.outcome {
            Ok(fit) => {
                let _ = write!(out, ",ok,,,{},{}", fit.response_iterations, fit.clamp_count);
                for v in fit.beta_hat.iter().chain(fit.variances.iter().flatten()) {
                    let _ = write!(out, ",{}", fmt_f64(*v));
                }
            }
            Err(f) => {
                let msg = f.message.replace([',', '\n', '"'], " ");
                let _ = write!(out, ",failed,{},{},NA,NA", f.cause, msg);
                for _ in 0..4 * p {
                    out.push_str(",NA");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<ReplicateRecord>> {
    let mut rdr = reader(input);
    let header = rdr.headers()?.clone();
    let p = header.iter().filter(|h| h.starts_with("beta_")).count();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = Row {
            kind: "records",
            header: &header,
            rec: &rec,
        };
        let run = match row.get("run")? {
            "estimate" => RunKind::Estimate,
            "reference" => RunKind::Reference,
            other => return Err(malformed("records", format!("unknown run {other:?}"))),
        };
        let outcome = match row.get("status")? {
            "ok" => {
                let beta_hat = (0..p)
                    .map(|k| row.f64(&format!("beta_{k}")))
                    .collect::<Result<Vec<_>>>()?;
                let var = |kind: EstimatorKind| {
                    (0..p)
                        .map(|k| row.f64(&format!("var_{kind}_{k}")))
                        .collect::<Result<Vec<_>>>()
                };
                Ok(ReplicateFit {
                    beta_hat,
                    variances: [
                        var(EstimatorKind::Naive)?,
                        var(EstimatorKind::Robust)?,
                        var(EstimatorKind::Linearized)?,
                    ],
                    response_iterations: row.parse("iterations")?,
                    clamp_count: row.parse("clamp_count")?,
                })
            }
            "failed" => Err(ReplicateFailure {
                cause: row.get("cause")?.to_string(),
                message: row.get("message")?.to_string(),
            }),
            other => return Err(malformed("records", format!("unknown status {other:?}"))),
        };
        out.push(ReplicateRecord {
            scenario: row.get("scenario")?.parse()?,
            run,
            replicate: row.parse("replicate")?,
            seed: row.parse("seed")?,
            response_rate: row.f64("response_rate")?,
            outcome,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report tables
// ---------------------------------------------------------------------------

/// Exposure-coefficient grid: `scenario,estimator,mean_V,V_ref,RB,n_fail,B,seed`.
pub fn report_csv(report: &SimulationReport, provenance_pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    provenance(&mut out, provenance_pairs);
    out.push_str("scenario,estimator,mean_V,V_ref,RB,n_fail,B,seed\n");
    for c in report.exposure_cells() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.scenario,
            c.estimator,
            fmt_f64(c.mean_v),
            fmt_opt(c.v_ref),
            fmt_opt(c.relative_bias),
            c.n_fail,
            c.replicates,
            c.seed
        );
    }
    out
}

/// Every coefficient: `scenario,coefficient,estimator,mean_V,V_ref,RB,n_fail,B,seed`.
pub fn extended_report_csv(report: &SimulationReport, provenance_pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    provenance(&mut out, provenance_pairs);
    out.push_str("scenario,coefficient,estimator,mean_V,V_ref,RB,n_fail,B,seed\n");
    for c in &report.cells {
        let name = ASSOCIATION_COLUMNS
            .get(c.coefficient)
            .map_or_else(|| format!("beta_{}", c.coefficient), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.scenario,
            name,
            c.estimator,
            fmt_f64(c.mean_v),
            fmt_opt(c.v_ref),
            fmt_opt(c.relative_bias),
            c.n_fail,
            c.replicates,
            c.seed
        );
    }
    out
}

/// Per-scenario diagnostics.
pub fn summary_csv(report: &SimulationReport, provenance_pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    provenance(&mut out, provenance_pairs);
    out.push_str(
        "scenario,B,B_ref,n_fail,n_fail_ref,mean_response_rate,mean_beta_x,sd_beta_x,valid,failure_causes\n",
    );
    for s in &report.scenarios {
        let causes: BTreeMap<_, _> = s.failure_causes.iter().collect();
        let causes = causes
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.scenario,
            s.replicates,
            s.reference_replicates,
            s.n_fail,
            s.n_fail_reference,
            fmt_f64(s.mean_response_rate),
            fmt_f64(s.mean_beta.get(1).copied().unwrap_or(f64::NAN)),
            fmt_f64(s.sd_beta.get(1).copied().unwrap_or(f64::NAN)),
            s.valid,
            causes
        );
    }
    out
}
