//! Subject-level data model and delimited-text ingestion.
//!
//! A study combines a randomized trial sample (follow-up time, event
//! indicator, arm, covariates) with an external sample from the target
//! population for which only covariates and a design weight are observed.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no records supplied")]
    Empty,
    #[error("record {index}: covariate vector has length {got}, expected {expected}")]
    CovariateLength { index: usize, expected: usize, got: usize },
    #[error("record {index}: follow-up time {value} is negative or non-finite")]
    InvalidTime { index: usize, value: f64 },
    #[error("record {index}: design weight {value} must be positive and finite")]
    InvalidDesignWeight { index: usize, value: f64 },
    #[error("record {index}: covariate `{name}` is non-finite")]
    NonFiniteCovariate { index: usize, name: String },
    #[error("study has no trial records")]
    NoTrialRecords,
    #[error("study has no external records")]
    NoExternalRecords,
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in `{path}`: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    UnparseableCell { row: usize, column: String, value: String },
    #[error("row {row}: negative follow-up time {value}")]
    NegativeTime { row: usize, value: f64 },
    #[error("row {row}: unknown category level `{value}` for covariate `{column}`")]
    UnknownLevel { row: usize, column: String, value: String },
    #[error("row {row}: unknown source label `{value}` (expected `{trial}` or `{external}`)")]
    UnknownSource { row: usize, value: String, trial: String, external: String },
    #[error("categorical covariate `{0}` must declare at least two levels")]
    DegenerateCategorical(String),
}

/// Trial arm; `Experimental` maps to treatment indicator 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Experimental,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Experimental];

    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Experimental => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Experimental => 1,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Control => write!(f, "0"),
            Arm::Experimental => write!(f, "1"),
        }
    }
}

/// Source-specific part of an observed record. A subject belongs to exactly
/// one source; outcome fields exist only for trial participants and the
/// design weight only for external ones (it is 1 inside the trial).
#[derive(Debug, Clone, PartialEq)]
pub enum SourceInfo {
    Trial { time: f64, event: bool, arm: Arm },
    External { design_weight: f64 },
}

/// One individual's observed tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub covariates: Vec<f64>,
    pub source: SourceInfo,
}

impl SubjectRecord {
    pub fn trial(time: f64, event: bool, arm: Arm, covariates: Vec<f64>) -> Self {
        SubjectRecord { covariates, source: SourceInfo::Trial { time, event, arm } }
    }

    pub fn external(covariates: Vec<f64>, design_weight: f64) -> Self {
        SubjectRecord { covariates, source: SourceInfo::External { design_weight } }
    }

    pub fn is_trial(&self) -> bool {
        matches!(self.source, SourceInfo::Trial { .. })
    }
}

/// Column-major trial sample used by the fitting routines.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub arms: Vec<Arm>,
    pub covariates: Array2<f64>,
}

impl TrialData {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    /// Materialize the subsample belonging to one arm.
    pub fn arm_subset(&self, arm: Arm) -> TrialData {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| self.arms[i] == arm).collect();
        let mut covariates = Array2::<f64>::zeros((idx.len(), self.n_features()));
        for (r, &i) in idx.iter().enumerate() {
            covariates.row_mut(r).assign(&self.covariates.row(i));
        }
        TrialData {
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            arms: idx.iter().map(|&i| self.arms[i]).collect(),
            covariates,
        }
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }

    pub fn max_time(&self) -> f64 {
        self.times.iter().cloned().fold(0.0, f64::max)
    }
}

/// External (target-population) sample: covariates and design weights only.
#[derive(Debug, Clone)]
pub struct ExternalData {
    pub covariates: Array2<f64>,
    pub design_weights: Vec<f64>,
}

impl ExternalData {
    pub fn len(&self) -> usize {
        self.design_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.design_weights.is_empty()
    }
}

/// Aligned trial + external samples sharing one covariate layout.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub feature_names: Vec<String>,
    pub trial: TrialData,
    pub external: ExternalData,
}

impl StudyData {
    /// Build a study from subject records, validating every field. The
    /// covariate vectors of all records must align with `feature_names`.
    pub fn from_records(
        records: &[SubjectRecord],
        feature_names: Vec<String>,
    ) -> Result<StudyData, DataError> {
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        let p = feature_names.len();
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut arms = Vec::new();
        let mut trial_rows: Vec<&[f64]> = Vec::new();
        let mut ext_rows: Vec<&[f64]> = Vec::new();
        let mut design_weights = Vec::new();
        for (index, rec) in records.iter().enumerate() {
            if rec.covariates.len() != p {
                return Err(DataError::CovariateLength {
                    index,
                    expected: p,
                    got: rec.covariates.len(),
                });
            }
            for (j, v) in rec.covariates.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFiniteCovariate {
                        index,
                        name: feature_names[j].clone(),
                    });
                }
            }
            match rec.source {
                SourceInfo::Trial { time, event, arm } => {
                    if !time.is_finite() || time < 0.0 {
                        return Err(DataError::InvalidTime { index, value: time });
                    }
                    times.push(time);
                    events.push(event);
                    arms.push(arm);
                    trial_rows.push(&rec.covariates);
                }
                SourceInfo::External { design_weight } => {
                    if !design_weight.is_finite() || design_weight <= 0.0 {
                        return Err(DataError::InvalidDesignWeight {
                            index,
                            value: design_weight,
                        });
                    }
                    design_weights.push(design_weight);
                    ext_rows.push(&rec.covariates);
                }
            }
        }
        let trial_x = rows_to_array(&trial_rows, p);
        let ext_x = rows_to_array(&ext_rows, p);
        Ok(StudyData {
            feature_names,
            trial: TrialData { times, events, arms, covariates: trial_x },
            external: ExternalData { covariates: ext_x, design_weights },
        })
    }

    pub fn require_trial(&self) -> Result<(), DataError> {
        if self.trial.is_empty() {
            return Err(DataError::NoTrialRecords);
        }
        Ok(())
    }

    pub fn require_external(&self) -> Result<(), DataError> {
        if self.external.is_empty() {
            return Err(DataError::NoExternalRecords);
        }
        Ok(())
    }

    /// Restrict both samples to the named feature subset (column projection).
    pub fn project(&self, keep: &[String]) -> StudyData {
        let idx: Vec<usize> = keep
            .iter()
            .filter_map(|name| self.feature_names.iter().position(|f| f == name))
            .collect();
        let project = |x: &Array2<f64>| {
            let mut out = Array2::<f64>::zeros((x.nrows(), idx.len()));
            for (jj, &j) in idx.iter().enumerate() {
                out.column_mut(jj).assign(&x.column(j));
            }
            out
        };
        StudyData {
            feature_names: idx.iter().map(|&j| self.feature_names[j].clone()).collect(),
            trial: TrialData {
                times: self.trial.times.clone(),
                events: self.trial.events.clone(),
                arms: self.trial.arms.clone(),
                covariates: project(&self.trial.covariates),
            },
            external: ExternalData {
                covariates: project(&self.external.covariates),
                design_weights: self.external.design_weights.clone(),
            },
        }
    }
}

fn rows_to_array(rows: &[&[f64]], p: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), p));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    out
}

/// Kind of a raw covariate column before expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    /// Categorical column; the first listed level is the reference and is
    /// dropped during indicator expansion.
    Categorical { levels: Vec<String> },
}

/// Declared covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

/// Ordered covariate layout shared by the trial and external files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub covariates: Vec<CovariateSpec>,
}

impl CovariateSchema {
    /// Feature names after indicator expansion, e.g. `cd4cat=mid`.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.covariates {
            match &c.kind {
                CovariateKind::Continuous => names.push(c.name.clone()),
                CovariateKind::Categorical { levels } => {
                    for level in levels.iter().skip(1) {
                        names.push(format!("{}={}", c.name, level));
                    }
                }
            }
        }
        names
    }
}

/// Column roles for [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    pub time_column: String,
    pub event_column: String,
    pub arm_column: String,
    /// Column holding the source label; `None` means every row carries
    /// `default_source`.
    pub source_column: Option<String>,
    #[serde(default)]
    pub default_source: Option<DefaultSource>,
    pub design_weight_column: Option<String>,
    /// Label in the arm column mapped to the experimental arm (indicator 1).
    pub experimental_arm: String,
    /// Label mapped to the control arm (indicator 0).
    pub control_arm: String,
    #[serde(default = "default_trial_label")]
    pub trial_source_label: String,
    #[serde(default = "default_external_label")]
    pub external_source_label: String,
    pub covariates: CovariateSchema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultSource {
    Trial,
    External,
}

fn default_trial_label() -> String {
    "trial".to_string()
}

fn default_external_label() -> String {
    "external".to_string()
}

/// Row-level validation summary produced during ingestion.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub n_rows: usize,
    pub n_trial: usize,
    pub n_external: usize,
    /// Trial rows whose arm label matched neither configured arm; these are
    /// dropped so a two-arm contrast can be run on a multi-arm export.
    pub n_dropped_other_arm: usize,
    pub flags: Vec<String>,
}

/// Result of ingesting one delimited file.
#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub records: Vec<SubjectRecord>,
    pub feature_names: Vec<String>,
    pub report: IngestReport,
}

/// Read and validate a delimited text file of subject records.
///
/// The file must carry a header row. Categorical covariates are expanded to
/// indicator columns (reference level dropped). External rows contribute
/// covariates and design weight only; their outcome cells may be blank.
/// Covariate columns entirely absent from the header are tolerated only when
/// the file contains no trial rows (mixed availability of external data) and
/// are dropped from the output layout.
pub fn ingest_csv(path: &Path, schema: &IngestSchema) -> Result<IngestOutput, DataError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?
        .clone();
    let col_index: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| col_index.get(name).copied();

    let source_idx = match &schema.source_column {
        Some(c) => Some(find(c).ok_or_else(|| DataError::MissingColumn(c.clone()))?),
        None => None,
    };
    let file_is_external_only =
        source_idx.is_none() && schema.default_source == Some(DefaultSource::External);

    // outcome columns are mandatory whenever trial rows can occur
    let outcome_idx = if file_is_external_only {
        None
    } else {
        let t = find(&schema.time_column)
            .ok_or_else(|| DataError::MissingColumn(schema.time_column.clone()))?;
        let e = find(&schema.event_column)
            .ok_or_else(|| DataError::MissingColumn(schema.event_column.clone()))?;
        let a = find(&schema.arm_column)
            .ok_or_else(|| DataError::MissingColumn(schema.arm_column.clone()))?;
        Some((t, e, a))
    };
    let weight_idx = match &schema.design_weight_column {
        Some(c) => find(c),
        None => None,
    };

    // resolve available covariates
    let mut active: Vec<(&CovariateSpec, usize)> = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    for spec in &schema.covariates.covariates {
        if let CovariateKind::Categorical { levels } = &spec.kind {
            if levels.len() < 2 {
                return Err(DataError::DegenerateCategorical(spec.name.clone()));
            }
        }
        match find(&spec.name) {
            Some(i) => active.push((spec, i)),
            None => missing.push(spec.name.clone()),
        }
    }
    if !missing.is_empty() && !file_is_external_only {
        return Err(DataError::MissingColumn(missing.remove(0)));
    }

    let mut feature_names = Vec::new();
    for (spec, _) in &active {
        match &spec.kind {
            CovariateKind::Continuous => feature_names.push(spec.name.clone()),
            CovariateKind::Categorical { levels } => {
                for level in levels.iter().skip(1) {
                    feature_names.push(format!("{}={}", spec.name, level));
                }
            }
        }
    }

    let mut report = IngestReport::default();
    if !missing.is_empty() {
        report.flags.push(format!(
            "covariates absent from `{path_str}` and dropped: {}",
            missing.join(", ")
        ));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
        let row_no = i + 2; // 1-based, after the header
        report.n_rows += 1;

        let is_trial = match source_idx {
            Some(si) => {
                let raw = row.get(si).unwrap_or("");
                if raw == schema.trial_source_label {
                    true
                } else if raw == schema.external_source_label {
                    false
                } else {
                    return Err(DataError::UnknownSource {
                        row: row_no,
                        value: raw.to_string(),
                        trial: schema.trial_source_label.clone(),
                        external: schema.external_source_label.clone(),
                    });
                }
            }
            None => match schema.default_source {
                Some(DefaultSource::Trial) => true,
                Some(DefaultSource::External) => false,
                None => true,
            },
        };

        // arm filtering happens before any parsing of other outcome fields
        let arm = if is_trial {
            let (_, _, ai) = outcome_idx.expect("trial row requires outcome columns");
            let raw = row.get(ai).unwrap_or("");
            if raw == schema.experimental_arm {
                Some(Arm::Experimental)
            } else if raw == schema.control_arm {
                Some(Arm::Control)
            } else {
                report.n_dropped_other_arm += 1;
                continue;
            }
        } else {
            None
        };

        let mut covariates = Vec::with_capacity(feature_names.len());
        for (spec, ci) in &active {
            let raw = row.get(*ci).unwrap_or("");
            match &spec.kind {
                CovariateKind::Continuous => {
                    let v: f64 = raw.parse().map_err(|_| DataError::UnparseableCell {
                        row: row_no,
                        column: spec.name.clone(),
                        value: raw.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::UnparseableCell {
                            row: row_no,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        });
                    }
                    covariates.push(v);
                }
                CovariateKind::Categorical { levels } => {
                    let pos = levels.iter().position(|l| l == raw).ok_or_else(|| {
                        DataError::UnknownLevel {
                            row: row_no,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        }
                    })?;
                    for k in 1..levels.len() {
                        covariates.push(if pos == k { 1.0 } else { 0.0 });
                    }
                }
            }
        }

        if is_trial {
            let (ti, ei, _) = outcome_idx.expect("trial row requires outcome columns");
            let raw_t = row.get(ti).unwrap_or("");
            let time: f64 = raw_t.parse().map_err(|_| DataError::UnparseableCell {
                row: row_no,
                column: schema.time_column.clone(),
                value: raw_t.to_string(),
            })?;
            if !time.is_finite() || time < 0.0 {
                return Err(DataError::NegativeTime { row: row_no, value: time });
            }
            let raw_e = row.get(ei).unwrap_or("");
            let event = match raw_e {
                "1" | "true" | "TRUE" => true,
                "0" | "false" | "FALSE" => false,
                other => {
                    return Err(DataError::UnparseableCell {
                        row: row_no,
                        column: schema.event_column.clone(),
                        value: other.to_string(),
                    })
                }
            };
            records.push(SubjectRecord::trial(time, event, arm.unwrap(), covariates));
            report.n_trial += 1;
        } else {
            let design_weight = match weight_idx {
                Some(wi) => {
                    let raw = row.get(wi).unwrap_or("");
                    if raw.is_empty() {
                        1.0
                    } else {
                        raw.parse().map_err(|_| DataError::UnparseableCell {
                            row: row_no,
                            column: schema.design_weight_column.clone().unwrap(),
                            value: raw.to_string(),
                        })?
                    }
                }
                None => 1.0,
            };
            records.push(SubjectRecord::external(covariates, design_weight));
            report.n_external += 1;
        }
    }

    Ok(IngestOutput { records, feature_names, report })
}
