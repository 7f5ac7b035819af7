//! Emulate individual-level external samples from published summary
//! statistics: categorical margins from reported proportions, continuous
//! margins from a shifted beta matched to the reported mean and standard
//! deviation, joined through a Gaussian copula carrying a rank-correlation
//! structure estimated from the trial (or overridden per entry).

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{StudyData, SubjectRecord};
use crate::estimators::{run_transport, EstimateError, EstimatorTag, TransportConfig};
use crate::linalg;

#[derive(Debug, Error)]
pub enum EmulationError {
    #[error("variable `{name}`: proportions sum to {sum:.6}, not 1")]
    ProportionsSum { name: String, sum: f64 },
    #[error("variable `{name}`: needs at least one level with positive proportion")]
    DegenerateCategorical { name: String },
    #[error("variable `{name}`: sd must be positive, got {sd}")]
    InvalidSd { name: String, sd: f64 },
    #[error("variable `{name}`: range requires lo < mean < hi (lo {lo}, mean {mean}, hi {hi})")]
    InvalidRange { name: String, lo: f64, mean: f64, hi: f64 },
    #[error(
        "variable `{name}`: infeasible beta moments; scaled variance {sigma2:.6} \
         must be below mu*(1-mu) = {bound:.6}"
    )]
    InfeasibleBeta { name: String, sigma2: f64, bound: f64 },
    #[error("copula needs at least 2 variables, got {0}")]
    TooFewVariables(usize),
    #[error("correlation matrix is {got}x{got}, spec has {expected} variables")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("correlation entry ({i},{j}) = {value} outside [-1, 1]")]
    InvalidCorrelation { i: usize, j: usize, value: f64 },
    #[error("robustness report requires at least one emulation repeat")]
    NoRepeats,
    #[error(transparent)]
    Transport(#[from] EstimateError),
}

/// Summary description of one variable in the target population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarginSummary {
    /// Ordered levels with their reported proportions. For ordinal variables
    /// the order must be the natural one so correlation signs are
    /// meaningful; nominal variables use the given order.
    Categorical { levels: Vec<String>, proportions: Vec<f64> },
    /// Reported mean and standard deviation with the support of the shifted
    /// beta margin.
    Continuous { mean: f64, sd: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    #[serde(flatten)]
    pub margin: MarginSummary,
}

/// Published summary statistics for one external population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySpec {
    pub variables: Vec<VariableSummary>,
    pub sample_size: usize,
    /// Proportions that do not sum to one (unreported remainder) are
    /// renormalized when set; the adjustment is reported in the notes.
    #[serde(default = "default_true")]
    pub renormalize_proportions: bool,
}

fn default_true() -> bool {
    true
}

impl SummarySpec {
    /// Validate margins, returning renormalized proportions and notes.
    fn resolved_margins(&self) -> Result<(Vec<MarginSummary>, Vec<String>), EmulationError> {
        let mut out = Vec::with_capacity(self.variables.len());
        let mut notes = Vec::new();
        for v in &self.variables {
            match &v.margin {
                MarginSummary::Categorical { levels, proportions } => {
                    if levels.is_empty() || proportions.iter().all(|&p| p <= 0.0) {
                        return Err(EmulationError::DegenerateCategorical {
                            name: v.name.clone(),
                        });
                    }
                    let sum: f64 = proportions.iter().sum();
                    let props = if (sum - 1.0).abs() <= 1e-9 {
                        proportions.clone()
                    } else if self.renormalize_proportions {
                        notes.push(format!(
                            "variable `{}`: proportions sum to {sum:.4}; renormalized",
                            v.name
                        ));
                        proportions.iter().map(|p| p / sum).collect()
                    } else {
                        return Err(EmulationError::ProportionsSum {
                            name: v.name.clone(),
                            sum,
                        });
                    };
                    out.push(MarginSummary::Categorical {
                        levels: levels.clone(),
                        proportions: props,
                    });
                }
                MarginSummary::Continuous { mean, sd, lo, hi } => {
                    if *sd <= 0.0 {
                        return Err(EmulationError::InvalidSd { name: v.name.clone(), sd: *sd });
                    }
                    if !(lo < mean && mean < hi) {
                        return Err(EmulationError::InvalidRange {
                            name: v.name.clone(),
                            lo: *lo,
                            mean: *mean,
                            hi: *hi,
                        });
                    }
                    let mu = (mean - lo) / (hi - lo);
                    let s2 = (sd / (hi - lo)).powi(2);
                    if s2 >= mu * (1.0 - mu) {
                        return Err(EmulationError::InfeasibleBeta {
                            name: v.name.clone(),
                            sigma2: s2,
                            bound: mu * (1.0 - mu),
                        });
                    }
                    out.push(v.margin.clone());
                }
            }
        }
        Ok((out, notes))
    }
}

/// Rank-correlation matrix coupling the emulated margins. Entries are
/// Spearman correlations; the Gaussian-copula parameter is obtained through
/// the sin transform 2 sin(pi rho / 6).
#[derive(Debug, Clone)]
pub struct CopulaSpec {
    pub rank_correlations: Array2<f64>,
    /// Set when estimation or overriding produced an indefinite matrix that
    /// was repaired by eigenvalue clipping.
    pub repaired: bool,
}

impl CopulaSpec {
    /// Independence copula for `p` variables.
    pub fn identity(p: usize) -> Self {
        CopulaSpec { rank_correlations: Array2::eye(p), repaired: false }
    }

    pub fn dim(&self) -> usize {
        self.rank_correlations.nrows()
    }

    /// Replace one symmetric entry (e.g. an increased-correlation override);
    /// the matrix is re-repaired if the edit makes it indefinite.
    pub fn with_override(mut self, i: usize, j: usize, rho: f64) -> Result<Self, EmulationError> {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(EmulationError::InvalidCorrelation { i, j, value: rho });
        }
        self.rank_correlations[[i, j]] = rho;
        self.rank_correlations[[j, i]] = rho;
        let (fixed, repaired) = repair_psd(&self.rank_correlations);
        self.rank_correlations = fixed;
        self.repaired = self.repaired || repaired;
        Ok(self)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        cov += a * b;
        vx += a * a;
        vy += b * b;
    }
    if vx <= 0.0 || vy <= 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j + 1 < n && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        let avg = (k + j + 2) as f64 / 2.0;
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}

/// Clip negative eigenvalues and rescale back to unit diagonal.
fn repair_psd(m: &Array2<f64>) -> (Array2<f64>, bool) {
    let (eig, v) = linalg::sym_eigen(m);
    let needs_repair = eig.iter().any(|&l| l < -1e-10);
    if !needs_repair {
        return (m.clone(), false);
    }
    let p = m.nrows();
    let mut out = Array2::<f64>::zeros((p, p));
    for a in 0..p {
        for b in 0..p {
            let mut s = 0.0;
            for k in 0..p {
                s += v[[a, k]] * eig[k].max(1e-10) * v[[b, k]];
            }
            out[[a, b]] = s;
        }
    }
    // rescale to a correlation matrix
    let diag: Vec<f64> = (0..p).map(|i| out[[i, i]].sqrt()).collect();
    for a in 0..p {
        for b in 0..p {
            out[[a, b]] /= diag[a] * diag[b];
        }
    }
    (out, true)
}

/// Pairwise Spearman correlations of the given (ordinal-coded) trial
/// columns, PSD-repaired where necessary.
pub fn estimate_copula_from_trial(
    columns: ArrayView2<'_, f64>,
    _names: &[String],
) -> Result<CopulaSpec, EmulationError> {
    let p = columns.ncols();
    if p < 2 {
        return Err(EmulationError::TooFewVariables(p));
    }
    let mut r = Array2::<f64>::eye(p);
    for i in 0..p {
        for j in (i + 1)..p {
            let rho = spearman(
                columns.column(i).as_slice().unwrap_or(&columns.column(i).to_vec()),
                columns.column(j).as_slice().unwrap_or(&columns.column(j).to_vec()),
            );
            r[[i, j]] = rho;
            r[[j, i]] = rho;
        }
    }
    let (fixed, repaired) = repair_psd(&r);
    Ok(CopulaSpec { rank_correlations: fixed, repaired })
}

/// One emulated external sample: per-variable columns on their natural
/// scales (level indices for categorical margins).
#[derive(Debug, Clone)]
pub struct EmulatedSample {
    pub variables: Vec<VariableSummary>,
    pub columns: Vec<EmulatedColumn>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum EmulatedColumn {
    Continuous(Vec<f64>),
    Categorical { level_indices: Vec<usize>, levels: Vec<String> },
}

impl EmulatedSample {
    pub fn len(&self) -> usize {
        match self.columns.first() {
            Some(EmulatedColumn::Continuous(v)) => v.len(),
            Some(EmulatedColumn::Categorical { level_indices, .. }) => level_indices.len(),
            None => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric view of one column (level index for categorical margins).
    pub fn numeric_column(&self, j: usize) -> Vec<f64> {
        match &self.columns[j] {
            EmulatedColumn::Continuous(v) => v.clone(),
            EmulatedColumn::Categorical { level_indices, .. } => {
                level_indices.iter().map(|&k| k as f64).collect()
            }
        }
    }

    /// Expand into external subject records with indicator-coded categorical
    /// levels (first level is the reference), mirroring the ingestion layout.
    pub fn to_external_records(&self) -> (Vec<SubjectRecord>, Vec<String>) {
        let mut feature_names = Vec::new();
        for (v, col) in self.variables.iter().zip(&self.columns) {
            match col {
                EmulatedColumn::Continuous(_) => feature_names.push(v.name.clone()),
                EmulatedColumn::Categorical { levels, .. } => {
                    for level in levels.iter().skip(1) {
                        feature_names.push(format!("{}={}", v.name, level));
                    }
                }
            }
        }
        let m = self.len();
        let mut records = Vec::with_capacity(m);
        for i in 0..m {
            let mut row = Vec::with_capacity(feature_names.len());
            for col in &self.columns {
                match col {
                    EmulatedColumn::Continuous(v) => row.push(v[i]),
                    EmulatedColumn::Categorical { level_indices, levels } => {
                        for k in 1..levels.len() {
                            row.push(if level_indices[i] == k { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            records.push(SubjectRecord::external(row, 1.0));
        }
        (records, feature_names)
    }
}

/// Draw `m` joint records: latent Gaussians with the copula's dependence are
/// pushed through each margin's inverse CDF (proportion thresholds for
/// categorical margins, method-of-moments shifted beta for continuous ones).
/// Deterministic for fixed `(spec, copula, m, seed)`.
pub fn emulate_sample(
    spec: &SummarySpec,
    copula: &CopulaSpec,
    m: usize,
    seed: u64,
) -> Result<EmulatedSample, EmulationError> {
    let p = spec.variables.len();
    if copula.dim() != p {
        return Err(EmulationError::DimensionMismatch { expected: p, got: copula.dim() });
    }
    for i in 0..p {
        for j in 0..p {
            let v = copula.rank_correlations[[i, j]];
            if !(-1.0..=1.0).contains(&v) {
                return Err(EmulationError::InvalidCorrelation { i, j, value: v });
            }
        }
    }
    let (margins, mut notes) = spec.resolved_margins()?;

    // rank correlation -> latent Gaussian parameter, then a PSD factor
    let mut latent = Array2::<f64>::eye(p);
    for i in 0..p {
        for j in 0..p {
            if i != j {
                latent[[i, j]] =
                    2.0 * (std::f64::consts::PI * copula.rank_correlations[[i, j]] / 6.0).sin();
            }
        }
    }
    let (latent, repaired) = repair_psd(&latent);
    if repaired {
        notes.push("latent correlation matrix repaired by eigenvalue clipping".to_string());
    }
    let chol = {
        let mut jitter = 0.0;
        loop {
            let mut a = latent.clone();
            for i in 0..p {
                a[[i, i]] += jitter;
            }
            match linalg::cholesky_lower(&a) {
                Ok(l) => break l,
                Err(_) if jitter < 1e-4 => {
                    jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 }
                }
                Err(_) => {
                    // last resort: independence factor
                    break Array2::eye(p);
                }
            }
        }
    };

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // per-margin inverse CDF machinery
    enum Margin {
        Cat { thresholds: Vec<f64>, levels: Vec<String> },
        Cont { beta: Beta, lo: f64, hi: f64 },
    }
    let mut machines = Vec::with_capacity(p);
    for (v, margin) in spec.variables.iter().zip(&margins) {
        match margin {
            MarginSummary::Categorical { levels, proportions } => {
                let mut cum = 0.0;
                let mut thresholds = Vec::with_capacity(proportions.len());
                for p in proportions {
                    cum += p;
                    thresholds.push(cum.min(1.0));
                }
                machines.push(Margin::Cat { thresholds, levels: levels.clone() });
            }
            MarginSummary::Continuous { mean, sd, lo, hi } => {
                let mu = (mean - lo) / (hi - lo);
                let s2 = (sd / (hi - lo)).powi(2);
                let scale = mu * (1.0 - mu) / s2 - 1.0;
                let alpha = mu * scale;
                let beta_p = (1.0 - mu) * scale;
                let beta = Beta::new(alpha, beta_p).map_err(|_| {
                    EmulationError::InfeasibleBeta {
                        name: v.name.clone(),
                        sigma2: s2,
                        bound: mu * (1.0 - mu),
                    }
                })?;
                machines.push(Margin::Cont { beta, lo: *lo, hi: *hi });
            }
        }
    }

    let mut columns: Vec<EmulatedColumn> = machines
        .iter()
        .map(|m| match m {
            Margin::Cat { levels, .. } => EmulatedColumn::Categorical {
                level_indices: Vec::new(),
                levels: levels.clone(),
            },
            Margin::Cont { .. } => EmulatedColumn::Continuous(Vec::new()),
        })
        .collect();

    let mut iid = vec![0.0f64; p];
    for _ in 0..m {
        for z in iid.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for j in 0..p {
            let mut zj = 0.0;
            for k in 0..=j.min(p - 1) {
                zj += chol[[j, k]] * iid[k];
            }
            let u = normal.cdf(zj).clamp(1e-12, 1.0 - 1e-12);
            match (&machines[j], &mut columns[j]) {
                (Margin::Cat { thresholds, .. }, EmulatedColumn::Categorical { level_indices, .. }) => {
                    let idx = thresholds.partition_point(|&t| t < u);
                    level_indices.push(idx.min(thresholds.len() - 1));
                }
                (Margin::Cont { beta, lo, hi }, EmulatedColumn::Continuous(values)) => {
                    values.push(lo + (hi - lo) * beta.inverse_cdf(u));
                }
                _ => unreachable!("machines and columns are built together"),
            }
        }
    }

    Ok(EmulatedSample { variables: spec.variables.clone(), columns, notes })
}

/// Sensitivity of the transported estimates to the emulation process: rerun
/// the pipeline over repeated emulations and copula variants, reporting the
/// maximum pointwise spread of each estimator's curves and the spread of the
/// treatment effect.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub estimator: EstimatorTag,
    pub arm_spread: [f64; 2],
    pub tate_range: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub n_runs: usize,
    pub rows: Vec<RobustnessRow>,
}

pub fn emulation_robustness_report(
    trial_study: &StudyData,
    cfg: &TransportConfig,
    spec: &SummarySpec,
    copulas: &[CopulaSpec],
    n_repeats: usize,
    seed: u64,
) -> Result<RobustnessReport, EmulationError> {
    if n_repeats == 0 || copulas.is_empty() {
        return Err(EmulationError::NoRepeats);
    }
    let mut runs = Vec::new();
    for (ci, copula) in copulas.iter().enumerate() {
        for r in 0..n_repeats {
            let rep_seed = seed
                .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + ci as u64))
                .wrapping_add(r as u64);
            let sample = emulate_sample(spec, copula, spec.sample_size, rep_seed)?;
            let (records, _names) = sample.to_external_records();
            let mut study = trial_study.clone();
            let p = study.feature_names.len();
            let mut x = Array2::<f64>::zeros((records.len(), p));
            let mut weights = Vec::with_capacity(records.len());
            for (i, rec) in records.iter().enumerate() {
                for j in 0..p {
                    x[[i, j]] = rec.covariates[j];
                }
                if let crate::data::SourceInfo::External { design_weight } = rec.source {
                    weights.push(design_weight);
                }
            }
            study.external.covariates = x;
            study.external.design_weights = weights;
            runs.push(run_transport(&study, cfg)?);
        }
    }

    let reference = &runs[0];
    let mut rows = Vec::new();
    for &tag in &cfg.estimators {
        let mut arm_spread = [0.0f64; 2];
        for arm in crate::data::Arm::BOTH {
            let Some(base) = reference.curve(tag, arm) else { continue };
            let mut spread = 0.0f64;
            for &t in &base.times {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for run in &runs {
                    if let Some(c) = run.curve(tag, arm) {
                        let v = c.value_at(t);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                spread = spread.max(hi - lo);
            }
            arm_spread[arm.index()] = spread;
        }
        let mut tlo = f64::INFINITY;
        let mut thi = f64::NEG_INFINITY;
        for run in &runs {
            if let Some(t) = run.tate(tag) {
                tlo = tlo.min(t.tate);
                thi = thi.max(t.tate);
            }
        }
        rows.push(RobustnessRow {
            estimator: tag,
            arm_spread,
            tate_range: if runs.is_empty() { 0.0 } else { thi - tlo },
        });
    }
    Ok(RobustnessReport { n_runs: runs.len(), rows })
}
