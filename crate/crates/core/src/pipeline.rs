//! Batch pipeline: configuration, data ingestion, orchestration of the
//! diagnostics / weighting / estimation stack, and emission of tables, curve
//! files, a diagnostics report, and a machine-readable run manifest. Outputs
//! are fully determined by the configuration and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    ingest_csv, CovariateKind, CovariateSchema, CovariateSpec, DataError, DefaultSource,
    IngestReport, IngestSchema, StudyData,
};
use crate::emulation::{
    emulate_sample, estimate_copula_from_trial, CopulaSpec, EmulatedColumn, EmulatedSample,
    EmulationError, SummarySpec,
};
use crate::estimators::{
    bootstrap, run_transport, BootstrapConfig, EstimateError, EstimatorTag,
    SurvivalCurveEstimate, TransportConfig, TransportResults,
};
use crate::hare::HareConfig;
use crate::survival::{
    fit_cox, schoenfeld_ph_test, CoxOptions, CoxResponse, PhTestResult, SurvivalError,
    TimeTransform,
};
use crate::weighting::{CalibrationSpec, GFunction};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Emulation(#[from] EmulationError),
    #[error("diagnostics: {0}")]
    Survival(#[from] SurvivalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 for configuration/validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Data(_) | PipelineError::Io(_) => 1,
            PipelineError::Estimate(e) => match e {
                EstimateError::Data(_)
                | EstimateError::NoEstimators
                | EstimateError::MissingArm(_)
                | EstimateError::HorizonOutsideFollowup { .. }
                | EstimateError::TooFewReplicates(_) => 1,
                _ => 2,
            },
            PipelineError::Emulation(e) => match e {
                EmulationError::Transport(_) => 2,
                _ => 1,
            },
            PipelineError::Survival(_) => 2,
        }
    }
}

/// Column roles and labels of the trial file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub trial_path: PathBuf,
    #[serde(default = "default_time")]
    pub time_column: String,
    #[serde(default = "default_event")]
    pub event_column: String,
    #[serde(default = "default_arm")]
    pub arm_column: String,
    /// Optional source column when trial and external rows share one file.
    #[serde(default)]
    pub source_column: Option<String>,
    #[serde(default)]
    pub design_weight_column: Option<String>,
    #[serde(default = "default_trial_label")]
    pub trial_source_label: String,
    #[serde(default = "default_external_label")]
    pub external_source_label: String,
}

fn default_time() -> String {
    "time".into()
}
fn default_event() -> String {
    "event".into()
}
fn default_arm() -> String {
    "arm".into()
}
fn default_trial_label() -> String {
    "trial".into()
}
fn default_external_label() -> String {
    "external".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmsConfig {
    /// Arm label mapped to treatment indicator 1.
    pub experimental: String,
    /// Arm label mapped to treatment indicator 0.
    pub control: String,
}

/// Where the external sample comes from: a file of records, or emulation
/// from summary statistics through a copula.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExternalConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<SummarySpec>,
    #[serde(default)]
    pub copula: Option<CopulaConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopulaConfig {
    #[serde(default = "default_copula_source")]
    pub source: CopulaSource,
    #[serde(default)]
    pub overrides: Vec<CopulaOverride>,
}

fn default_copula_source() -> CopulaSource {
    CopulaSource::Trial
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaSource {
    /// Rank correlations estimated from the trial columns.
    Trial,
    /// Independence copula.
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopulaOverride {
    pub var1: String,
    pub var2: String,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub horizon: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    /// Bootstrap replicates; 0 disables the bootstrap.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub isotonize: bool,
    /// Features entering g(X); default is every shared covariate column.
    #[serde(default)]
    pub calibration_features: Option<Vec<String>>,
    #[serde(default)]
    pub hare_max_terms: Option<usize>,
}

fn default_true() -> bool {
    true
}

fn default_estimators() -> Vec<String> {
    EstimatorTag::STANDARD.iter().map(|t| t.as_str().to_string()).collect()
}

/// Full run configuration; the CLI deserializes this from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arms: ArmsConfig,
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    fn ingest_schema(&self, default_source: Option<DefaultSource>) -> IngestSchema {
        IngestSchema {
            time_column: self.data.time_column.clone(),
            event_column: self.data.event_column.clone(),
            arm_column: self.data.arm_column.clone(),
            source_column: self.data.source_column.clone(),
            default_source,
            design_weight_column: self.data.design_weight_column.clone(),
            experimental_arm: self.arms.experimental.clone(),
            control_arm: self.arms.control.clone(),
            trial_source_label: self.data.trial_source_label.clone(),
            external_source_label: self.data.external_source_label.clone(),
            covariates: CovariateSchema { covariates: self.covariates.clone() },
        }
    }

    fn estimator_tags(&self) -> Result<Vec<EstimatorTag>, PipelineError> {
        self.analysis
            .estimators
            .iter()
            .map(|s| s.parse::<EstimatorTag>().map_err(PipelineError::Config))
            .collect()
    }
}

/// Everything a run produced, with the emitted file paths.
#[derive(Debug)]
pub struct RunOutputs {
    pub results: TransportResults,
    pub ph_tests: Vec<(String, PhTestResult)>,
    pub files: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Assemble the study sample: ingest the trial file, attach the external
/// sample (file or emulation), and project both onto the shared covariates.
fn assemble_study(
    config: &RunConfig,
) -> Result<(StudyData, IngestReport, Vec<String>), PipelineError> {
    let default_source = if config.data.source_column.is_some() {
        None
    } else {
        Some(DefaultSource::Trial)
    };
    let trial_out = ingest_csv(&config.data.trial_path, &config.ingest_schema(default_source))?;
    let mut notes = trial_out.report.flags.clone();
    let mut records = trial_out.records;
    let mut report = trial_out.report.clone();
    let trial_features = trial_out.feature_names.clone();

    let external_features: Option<Vec<String>> = match &config.external {
        None => None,
        Some(ext) => {
            if let Some(path) = &ext.path {
                let mut schema = config.ingest_schema(Some(DefaultSource::External));
                schema.source_column = None;
                let out = ingest_csv(path, &schema)?;
                notes.extend(out.report.flags.clone());
                report.n_external += out.report.n_external;
                report.n_rows += out.report.n_rows;
                // align the external (possibly reduced) layout onto the
                // trial layout before merging record vectors
                let idx: Vec<Option<usize>> = trial_features
                    .iter()
                    .map(|f| out.feature_names.iter().position(|g| g == f))
                    .collect();
                for rec in out.records {
                    let mut row = Vec::with_capacity(trial_features.len());
                    for m in &idx {
                        row.push(match m {
                            Some(j) => rec.covariates[*j],
                            None => f64::NAN, // dropped below via projection
                        });
                    }
                    records.push(crate::data::SubjectRecord { covariates: row, ..rec });
                }
                Some(out.feature_names)
            } else if let Some(summary) = &ext.summary {
                let copula = build_copula(config, summary)?;
                let sample =
                    emulate_sample(summary, &copula, summary.sample_size, config.analysis.seed)?;
                notes.extend(sample.notes.clone());
                let (ext_records, ext_features) = sample.to_external_records();
                report.n_external += ext_records.len();
                let idx: Vec<Option<usize>> = trial_features
                    .iter()
                    .map(|f| ext_features.iter().position(|g| g == f))
                    .collect();
                for rec in ext_records {
                    let mut row = Vec::with_capacity(trial_features.len());
                    for m in &idx {
                        row.push(match m {
                            Some(j) => rec.covariates[*j],
                            None => f64::NAN,
                        });
                    }
                    records.push(crate::data::SubjectRecord { covariates: row, ..rec });
                }
                Some(ext_features)
            } else {
                return Err(PipelineError::Config(
                    "external source needs either `path` or `summary`".into(),
                ));
            }
        }
    };

    // shared feature set: trial features available in the external layout
    let shared: Vec<String> = match &external_features {
        None => trial_features.clone(),
        Some(ext) => trial_features.iter().filter(|f| ext.contains(f)).cloned().collect(),
    };
    if let Some(ext) = &external_features {
        let dropped: Vec<&String> =
            trial_features.iter().filter(|f| !ext.contains(*f)).collect();
        if !dropped.is_empty() {
            notes.push(format!(
                "covariates unavailable in the external sample and excluded from \
                 modeling: {}",
                dropped.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
    }
    if shared.is_empty() {
        return Err(PipelineError::Config(
            "no shared covariates between trial and external samples".into(),
        ));
    }

    // NaN placeholders only exist in columns outside `shared`; project first
    let full = StudyDataBuilder { records, features: trial_features }.build_projected(&shared)?;
    report.flags = notes.clone();
    Ok((full, report, notes))
}

struct StudyDataBuilder {
    records: Vec<crate::data::SubjectRecord>,
    features: Vec<String>,
}

impl StudyDataBuilder {
    fn build_projected(self, shared: &[String]) -> Result<StudyData, DataError> {
        let idx: Vec<usize> = shared
            .iter()
            .filter_map(|f| self.features.iter().position(|g| g == f))
            .collect();
        let projected: Vec<crate::data::SubjectRecord> = self
            .records
            .into_iter()
            .map(|rec| crate::data::SubjectRecord {
                covariates: idx.iter().map(|&j| rec.covariates[j]).collect(),
                source: rec.source,
            })
            .collect();
        StudyData::from_records(&projected, shared.to_vec())
    }
}

fn build_copula(
    config: &RunConfig,
    summary: &SummarySpec,
) -> Result<CopulaSpec, PipelineError> {
    let p = summary.variables.len();
    let copula_cfg = config.external.as_ref().and_then(|e| e.copula.clone());
    let source = copula_cfg.as_ref().map_or(CopulaSource::Trial, |c| c.source);
    let mut copula = match source {
        CopulaSource::Identity => CopulaSpec::identity(p),
        CopulaSource::Trial => {
            if p < 2 {
                CopulaSpec::identity(p)
            } else {
                let columns = trial_ordinal_columns(config, summary)?;
                estimate_copula_from_trial(
                    columns.view(),
                    &summary.variables.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
                )?
            }
        }
    };
    if let Some(cfg) = copula_cfg {
        for ov in cfg.overrides {
            let find = |name: &str| {
                summary.variables.iter().position(|v| v.name == name).ok_or_else(|| {
                    PipelineError::Config(format!(
                        "copula override references unknown variable `{name}`"
                    ))
                })
            };
            let i = find(&ov.var1)?;
            let j = find(&ov.var2)?;
            copula = copula.with_override(i, j, ov.rho)?;
        }
    }
    Ok(copula)
}

/// Ordinal-coded trial columns for the emulation variables: continuous
/// columns read directly, categorical columns coded by level position.
/// Variables absent from the trial file contribute an all-zero column (their
/// correlations can only come from overrides).
fn trial_ordinal_columns(
    config: &RunConfig,
    summary: &SummarySpec,
) -> Result<Array2<f64>, PipelineError> {
    let path = &config.data.trial_path;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv { path: path.display().to_string(), source: e })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { path: path.display().to_string(), source: e })?
        .clone();
    let field = |name: &str| headers.iter().position(|h| h == name);

    struct ColPlan {
        col: Option<usize>,
        levels: Option<Vec<String>>,
    }
    let plans: Vec<ColPlan> = summary
        .variables
        .iter()
        .map(|v| {
            let levels = config.covariates.iter().find(|c| c.name == v.name).and_then(|c| {
                match &c.kind {
                    CovariateKind::Categorical { levels } => Some(levels.clone()),
                    CovariateKind::Continuous => None,
                }
            });
            ColPlan { col: field(&v.name), levels }
        })
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec =
            rec.map_err(|e| DataError::Csv { path: path.display().to_string(), source: e })?;
        let mut row = Vec::with_capacity(plans.len());
        for plan in &plans {
            let value = match plan.col {
                None => 0.0,
                Some(ci) => {
                    let raw = rec.get(ci).unwrap_or("");
                    match &plan.levels {
                        Some(levels) => {
                            levels.iter().position(|l| l == raw).map_or(f64::NAN, |p| p as f64)
                        }
                        None => raw.parse().unwrap_or(f64::NAN),
                    }
                }
            };
            row.push(value);
        }
        if row.iter().all(|v| v.is_finite()) {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(PipelineError::Config(
            "no usable trial rows for copula estimation".into(),
        ));
    }
    let mut out = Array2::<f64>::zeros((rows.len(), plans.len()));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

fn transport_config(config: &RunConfig, study: &StudyData) -> Result<TransportConfig, PipelineError> {
    let tags = config.estimator_tags()?;
    let calibration = match &config.analysis.calibration_features {
        None => None,
        Some(features) => {
            let functions: Vec<GFunction> = features
                .iter()
                .map(|f| {
                    study
                        .feature_names
                        .iter()
                        .position(|g| g == f)
                        .map(GFunction::Linear)
                        .ok_or_else(|| {
                            PipelineError::Config(format!(
                                "calibration feature `{f}` is not a shared covariate"
                            ))
                        })
                })
                .collect::<Result<_, _>>()?;
            let targets = crate::weighting::compute_target_moments(
                &study.external,
                &functions,
                features,
            )
            .map_err(EstimateError::Weight)?;
            Some(CalibrationSpec {
                names: features.clone(),
                functions,
                target_moments: targets,
            })
        }
    };
    Ok(TransportConfig {
        horizon: config.analysis.horizon,
        estimators: tags,
        hare: HareConfig {
            max_terms: config.analysis.hare_max_terms,
            ..HareConfig::default()
        },
        calibration,
        outcome_features: None,
        isotonize: config.analysis.isotonize,
        censoring_inflation_cap: 50.0,
    })
}

/// Schoenfeld proportionality tests per arm on the shared covariates.
fn ph_diagnostics(study: &StudyData) -> Vec<(String, Result<PhTestResult, SurvivalError>)> {
    let mut out = Vec::new();
    for arm in crate::data::Arm::BOTH {
        let sub = study.trial.arm_subset(arm);
        if sub.n_features() == 0 {
            continue;
        }
        let result = fit_cox(
            &sub.times,
            &sub.events,
            sub.covariates.view(),
            CoxResponse::Event,
            CoxOptions::default(),
        )
        .and_then(|fit| {
            schoenfeld_ph_test(
                &fit,
                &sub.times,
                &sub.events,
                sub.covariates.view(),
                TimeTransform::KaplanMeier,
            )
        });
        out.push((format!("arm {arm}"), result));
    }
    out
}

fn write_atomic(path: &Path, content: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn curve_file(
    treated: &SurvivalCurveEstimate,
    control: &SurvivalCurveEstimate,
) -> String {
    let mut times: Vec<f64> =
        treated.times.iter().chain(control.times.iter()).cloned().collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let mut out = String::from("time,s0,s1,s0_lower,s0_upper,s1_lower,s1_upper\n");
    let band = |c: &SurvivalCurveEstimate, t: f64, which: bool| -> Option<f64> {
        let bounds = if which { c.upper.as_ref() } else { c.lower.as_ref() }?;
        match c.times.partition_point(|&u| u <= t) {
            0 => Some(1.0),
            k => Some(bounds[k - 1]),
        }
    };
    for &t in &times {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t,
            control.value_at(t),
            treated.value_at(t),
            fmt_opt(band(control, t, false)),
            fmt_opt(band(control, t, true)),
            fmt_opt(band(treated, t, false)),
            fmt_opt(band(treated, t, true)),
        );
    }
    out
}

/// Execute a full run: ingest, diagnose, estimate, bootstrap, and write the
/// output bundle into the configured directory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutputs, PipelineError> {
    let (study, ingest_report, _notes) = assemble_study(config)?;
    let tcfg = transport_config(config, &study)?;
    let mut results = run_transport(&study, &tcfg)?;

    // bootstrap uncertainty
    if config.analysis.bootstrap > 0 {
        let summary = bootstrap(
            &study,
            &tcfg,
            &results,
            BootstrapConfig {
                replicates: config.analysis.bootstrap,
                seed: config.analysis.seed,
            },
        )?;
        for band in &summary.curve_bands {
            if let Some(curve) = results
                .curves
                .iter_mut()
                .find(|c| c.estimator == band.estimator && c.arm == band.arm)
            {
                curve.lower = Some(band.lower.clone());
                curve.upper = Some(band.upper.clone());
            }
        }
        for t in &summary.tates {
            if let Some((_, est)) =
                results.tates.iter_mut().find(|(tag, _)| *tag == t.estimator)
            {
                est.std_error = Some(t.std_error);
                est.ci_lower = Some(t.ci_lower);
                est.ci_upper = Some(t.ci_upper);
            }
        }
        if summary.n_failed > 0 {
            results
                .diagnostics
                .notes
                .push(format!("bootstrap: {} replicate(s) failed and were dropped", summary.n_failed));
        }
    }

    // proportionality diagnostics on the analysis covariates
    let mut ph_tests = Vec::new();
    for (label, res) in ph_diagnostics(&study) {
        match res {
            Ok(t) => ph_tests.push((label, t)),
            Err(e) => results.diagnostics.notes.push(format!("ph test {label}: {e}")),
        }
    }

    let out_dir = &config.analysis.output_dir;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    // (a) TATE table
    let mut tate_csv = String::from(
        "estimator,horizon,survival_treated,survival_control,tate,std_error,ci_lower,ci_upper\n",
    );
    for (tag, est) in &results.tates {
        let _ = writeln!(
            tate_csv,
            "{},{},{},{},{},{},{},{}",
            tag,
            est.horizon,
            est.survival_treated,
            est.survival_control,
            est.tate,
            fmt_opt(est.std_error),
            fmt_opt(est.ci_lower),
            fmt_opt(est.ci_upper),
        );
    }
    let tate_path = out_dir.join("tate.csv");
    write_atomic(&tate_path, &tate_csv)?;
    files.push(tate_path);

    // (b) curve files per estimator
    for (tag, _) in &results.tates {
        let treated = results
            .curve(*tag, crate::data::Arm::Experimental)
            .expect("curve present");
        let control = results.curve(*tag, crate::data::Arm::Control).expect("curve present");
        let path = out_dir.join(format!("curves_{}.csv", tag.as_str()));
        write_atomic(&path, &curve_file(treated, control))?;
        files.push(path);
    }

    // (c) diagnostics report
    let mut diag = String::new();
    let _ = writeln!(diag, "ingestion: {} trial rows, {} external rows, {} other-arm rows dropped",
        ingest_report.n_trial, ingest_report.n_external, ingest_report.n_dropped_other_arm);
    for (label, t) in &ph_tests {
        let _ = writeln!(
            diag,
            "ph test ({label}, transform {}): global chisq {:.4}, p {:.4}",
            t.time_transform_tag, t.global_chisq, t.global_p
        );
        for (j, name) in study.feature_names.iter().enumerate() {
            let _ = writeln!(
                diag,
                "  {}: chisq {:.4}, p {:.4}",
                name, t.per_covariate_chisq[j], t.per_covariate_p[j]
            );
        }
    }
    if let Some(w) = &results.diagnostics.weight_diagnostics {
        let _ = writeln!(
            diag,
            "calibration: {} iterations, constraint residual {:.3e}, effective sample size {:.1}",
            w.calibration_iterations, w.constraint_residual, w.effective_sample_size
        );
        for n in &w.notes {
            let _ = writeln!(diag, "weighting note: {n}");
        }
    }
    if let Some(ws) = &results.weights {
        let min_w = ws.calib_weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_w = ws.calib_weights.iter().cloned().fold(0.0f64, f64::max);
        let _ = writeln!(diag, "calibration weights: min {min_w:.3e}, max {max_w:.3e}");
    }
    if results.diagnostics.censoring_cap_hits > 0 {
        let _ = writeln!(
            diag,
            "censoring inflation capped {} time(s)",
            results.diagnostics.censoring_cap_hits
        );
    }
    for c in &results.diagnostics.isotonized {
        let _ = writeln!(diag, "monotonized: {c}");
    }
    for n in &ingest_report.flags {
        let _ = writeln!(diag, "note: {n}");
    }
    for n in &results.diagnostics.notes {
        let _ = writeln!(diag, "note: {n}");
    }
    let diag_path = out_dir.join("diagnostics.txt");
    write_atomic(&diag_path, &diag)?;
    files.push(diag_path);

    // (d) machine-readable manifest
    let manifest_path = out_dir.join("manifest.json");
    let mut file_hashes = BTreeMap::new();
    for f in &files {
        let bytes = fs::read(f)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        file_hashes.insert(
            f.file_name().unwrap().to_string_lossy().to_string(),
            format!("{:x}", hasher.finalize()),
        );
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        package_version: &'a str,
        config: &'a RunConfig,
        n_trial: usize,
        n_external: usize,
        files: BTreeMap<String, String>,
    }
    let manifest = Manifest {
        package_version: env!("CARGO_PKG_VERSION"),
        config,
        n_trial: study.trial.len(),
        n_external: study.external.len(),
        files: file_hashes,
    };
    write_atomic(&manifest_path, &serde_json::to_string_pretty(&manifest).unwrap())?;

    Ok(RunOutputs { results, ph_tests, files, manifest_path })
}

/// Proportionality diagnostics only (the `diagnose-ph` subcommand): Cox fit
/// and Schoenfeld test per arm, written as a small table.
pub fn run_ph_diagnostics(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let default_source = if config.data.source_column.is_some() {
        None
    } else {
        Some(DefaultSource::Trial)
    };
    let out = ingest_csv(&config.data.trial_path, &config.ingest_schema(default_source))?;
    let study = StudyData::from_records(&out.records, out.feature_names.clone())?;
    study.require_trial()?;

    let mut csv = String::from("arm,covariate,chisq,p\n");
    for (label, res) in ph_diagnostics(&study) {
        let t = res?;
        for (j, name) in study.feature_names.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{label},{name},{},{}",
                t.per_covariate_chisq[j], t.per_covariate_p[j]
            );
        }
        let _ = writeln!(csv, "{label},GLOBAL,{},{}", t.global_chisq, t.global_p);
    }
    let out_dir = &config.analysis.output_dir;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("ph_tests.csv");
    write_atomic(&path, &csv)?;
    Ok(path)
}

/// Emulate an external sample and write it as a delimited file (the
/// `emulate` subcommand). Categorical margins are written as level names.
pub fn run_emulate(
    config: &RunConfig,
    m_override: Option<usize>,
    out_path: &Path,
) -> Result<EmulatedSample, PipelineError> {
    let summary = config
        .external
        .as_ref()
        .and_then(|e| e.summary.as_ref())
        .ok_or_else(|| {
            PipelineError::Config("emulate requires an external summary spec".into())
        })?;
    let copula = build_copula(config, summary)?;
    let m = m_override.unwrap_or(summary.sample_size);
    let sample = emulate_sample(summary, &copula, m, config.analysis.seed)?;

    let mut csv = String::new();
    let names: Vec<&str> = sample.variables.iter().map(|v| v.name.as_str()).collect();
    csv.push_str(&names.join(","));
    csv.push('\n');
    for i in 0..sample.len() {
        let mut cells = Vec::with_capacity(names.len());
        for col in &sample.columns {
            match col {
                EmulatedColumn::Continuous(v) => cells.push(format!("{}", v[i])),
                EmulatedColumn::Categorical { level_indices, levels } => {
                    cells.push(levels[level_indices[i]].clone())
                }
            }
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_atomic(out_path, &csv)?;
    Ok(sample)
}
