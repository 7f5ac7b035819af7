use ndarray::{ArrayView1, ArrayView2};
use serde::Serialize;

use crate::data::{Arm, StudyData, TrialData};
use crate::hare::{cumulative_hazard_grid, fit_hare, HareConfig, HareFit};
use crate::survival::{fit_cox, CoxFit, CoxOptions, CoxResponse};
use crate::weighting::{estimate_weights, CalibrationSpec, WeightDiagnostics, WeightSet};

use super::curves::{estimate_tate, EstimatorTag, SurvivalCurveEstimate, TateEstimate};
use super::EstimateError;

/// Configuration of one transport analysis.
#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Landmark time at which the treatment effect is reported.
    pub horizon: f64,
    pub estimators: Vec<EstimatorTag>,
    pub hare: HareConfig,
    /// Calibration constraints; `None` selects first moments of every shared
    /// covariate column.
    pub calibration: Option<CalibrationSpec>,
    /// Covariates entering the outcome models; `None` uses every shared
    /// column. The weighting models keep their own covariate selection.
    pub outcome_features: Option<Vec<String>>,
    /// Post-process curves to be monotone non-increasing (logged when it
    /// changes anything).
    pub isotonize: bool,
    /// Cap on the censoring inflation factor exp(Lambda^C).
    pub censoring_inflation_cap: f64,
}

impl TransportConfig {
    pub fn new(horizon: f64) -> Self {
        TransportConfig {
            horizon,
            estimators: EstimatorTag::STANDARD.to_vec(),
            hare: HareConfig::default(),
            calibration: None,
            outcome_features: None,
            isotonize: true,
            censoring_inflation_cap: 50.0,
        }
    }
}

/// Diagnostics accumulated over a pipeline run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunDiagnostics {
    pub notes: Vec<String>,
    pub weight_diagnostics: Option<WeightDiagnostics>,
    /// Curves whose values were moved by the monotonization/clamping step.
    pub isotonized: Vec<String>,
    pub censoring_cap_hits: usize,
}

/// Point estimates from one transport run.
#[derive(Debug, Clone)]
pub struct TransportResults {
    pub curves: Vec<SurvivalCurveEstimate>,
    pub tates: Vec<(EstimatorTag, TateEstimate)>,
    pub diagnostics: RunDiagnostics,
    pub weights: Option<WeightSet>,
}

impl TransportResults {
    pub fn curve(&self, tag: EstimatorTag, arm: Arm) -> Option<&SurvivalCurveEstimate> {
        self.curves.iter().find(|c| c.estimator == tag && c.arm == arm)
    }

    pub fn tate(&self, tag: EstimatorTag) -> Option<&TateEstimate> {
        self.tates.iter().find(|(t, _)| *t == tag).map(|(_, e)| e)
    }
}

/// Conditional cumulative-hazard model for one arm.
pub(crate) enum OutcomeModel<'a> {
    Cox(&'a CoxFit),
    Hare(&'a HareFit),
}

impl OutcomeModel<'_> {
    /// Lambda(t | x) on a sorted grid.
    pub(crate) fn cumhaz_grid(
        &self,
        x: ArrayView1<'_, f64>,
        grid: &[f64],
    ) -> Result<Vec<f64>, EstimateError> {
        match self {
            OutcomeModel::Cox(fit) => {
                let mult = fit.linear_predictor(x.as_slice().expect("contiguous"))?.exp();
                Ok(grid.iter().map(|&t| fit.baseline_cumhaz.value_at(t) * mult).collect())
            }
            OutcomeModel::Hare(fit) => {
                Ok(cumulative_hazard_grid(&fit.basis, &fit.coefficients, x, grid)?)
            }
        }
    }
}

/// Per-arm integration grid: distinct observed times of the arm's subjects
/// up to the horizon, with the horizon appended as the final point.
fn integration_grid(trial: &TrialData, arm: Arm, horizon: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = trial
        .times
        .iter()
        .zip(&trial.arms)
        .filter(|(&t, &a)| a == arm && t <= horizon && t > 0.0)
        .map(|(&t, _)| t)
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    if grid.last().map_or(true, |&t| t < horizon) {
        grid.push(horizon);
    }
    grid
}

/// Reporting times: distinct event times of the arm up to the horizon plus
/// the horizon itself.
fn report_times(trial: &TrialData, arm: Arm, horizon: f64) -> Vec<f64> {
    let mut times: Vec<f64> = trial
        .times
        .iter()
        .zip(&trial.arms)
        .zip(&trial.events)
        .filter(|((&t, &a), &e)| a == arm && e && t <= horizon && t > 0.0)
        .map(|((&t, _), _)| t)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    if times.last().map_or(true, |&t| t < horizon) {
        times.push(horizon);
    }
    times
}

/// Mean of exp(-Lambda(t|x)) over the given covariate rows, per grid time.
fn model_average_curve(
    outcome: &OutcomeModel<'_>,
    rows: ArrayView2<'_, f64>,
    grid: &[f64],
) -> Result<Vec<f64>, EstimateError> {
    let n = rows.nrows();
    let mut acc = vec![0.0; grid.len()];
    for i in 0..n {
        let cum = outcome.cumhaz_grid(rows.row(i), grid)?;
        for (k, c) in cum.iter().enumerate() {
            acc[k] += (-c).exp();
        }
    }
    for v in acc.iter_mut() {
        *v /= n as f64;
    }
    Ok(acc)
}

struct WeightedInputs<'a> {
    grid: &'a [f64],
    times: &'a [f64],
    active: &'a [bool],
    /// Sampling weight per trial subject (calibration or inverse-odds).
    sampling: &'a [f64],
    /// Arm-specific propensity pi_ai per trial subject.
    propensity_arm: &'a [f64],
    /// Censoring baseline evaluated on the grid.
    censor_base: &'a [f64],
    /// Per-subject censoring multiplier exp(gamma' g_i).
    censor_mult: &'a [f64],
    cap: f64,
}

/// Weighted at-risk curve with censoring inflation, self-normalized by its
/// mass at time zero so S(0) = 1 exactly.
fn weighted_values(inp: &WeightedInputs<'_>) -> (Vec<f64>, usize) {
    let kk = inp.grid.len();
    let mut acc = vec![0.0; kk];
    let mut mass0 = 0.0;
    let mut cap_hits = 0usize;
    for i in 0..inp.times.len() {
        if !inp.active[i] {
            continue;
        }
        let w = inp.sampling[i] / inp.propensity_arm[i];
        if w == 0.0 {
            continue;
        }
        mass0 += w;
        let ui = inp.times[i];
        for k in 0..kk {
            if inp.grid[k] > ui {
                break;
            }
            let mut infl = (inp.censor_base[k] * inp.censor_mult[i]).exp();
            if infl > inp.cap {
                infl = inp.cap;
                cap_hits += 1;
            }
            acc[k] += w * infl;
        }
    }
    if mass0 > 0.0 {
        for v in acc.iter_mut() {
            *v /= mass0;
        }
    }
    (acc, cap_hits)
}

struct AcwInputs<'a> {
    grid: &'a [f64],
    times: &'a [f64],
    events: &'a [bool],
    active: &'a [bool],
    sampling: &'a [f64],
    propensity_arm: &'a [f64],
    censor_base: &'a [f64],
    censor_mult: &'a [f64],
    outcome: &'a OutcomeModel<'a>,
    x_trial: ArrayView2<'a, f64>,
    x_external: ArrayView2<'a, f64>,
    cap: f64,
}

/// Augmented weighted estimator: survival is exp(-sum of num/denom ratios)
/// accumulated over the grid, where num estimates -dS and denom estimates S
/// through the weighted at-risk process plus the outcome-model augmentation
/// with its censoring-martingale correction. Exponents inside the martingale
/// integral use left limits; point factors are evaluated at the grid time.
fn acw_values(inp: &AcwInputs<'_>) -> Result<(Vec<f64>, usize), f64> {
    let kk = inp.grid.len();
    let m = inp.x_external.nrows();
    let mut denom = vec![0.0; kk];
    let mut num = vec![0.0; kk];
    let mut cap_hits = 0usize;

    // external averages of the outcome model
    for j in 0..m {
        let cum = inp
            .outcome
            .cumhaz_grid(inp.x_external.row(j), inp.grid)
            .expect("outcome model covers external covariates");
        let mut prev = 0.0;
        for k in 0..kk {
            let s = (-cum[k]).exp();
            denom[k] += s / m as f64;
            num[k] += s * (cum[k] - prev) / m as f64;
            prev = cum[k];
        }
    }

    // trial subjects of this arm
    for i in 0..inp.times.len() {
        if !inp.active[i] {
            continue;
        }
        let w = inp.sampling[i] / inp.propensity_arm[i];
        if w == 0.0 {
            continue;
        }
        let cum = inp
            .outcome
            .cumhaz_grid(inp.x_trial.row(i), inp.grid)
            .expect("outcome model covers trial covariates");
        let ui = inp.times[i];
        let event_i = inp.events[i];
        let mut aug = 0.0; // running martingale integral G_i
        let mut prev_lc = 0.0f64;
        let mut prev_lo = 0.0f64;
        for k in 0..kk {
            let u = inp.grid[k];
            let lc = inp.censor_base[k] * inp.censor_mult[i];
            let at_risk = ui >= u;
            // martingale increment with predictable exponent
            let mut e_pred_c = prev_lc.exp();
            if e_pred_c > inp.cap {
                e_pred_c = inp.cap;
                cap_hits += 1;
            }
            let d_nc = (ui == u && !event_i) as u8 as f64;
            let d_lc = lc - prev_lc;
            let dm = d_nc - if at_risk { d_lc } else { 0.0 };
            aug += e_pred_c * prev_lo.exp() * dm;

            let mut infl = lc.exp();
            if infl > inp.cap {
                infl = inp.cap;
                cap_hits += 1;
            }
            let s_i = (-cum[k]).exp();
            if at_risk {
                denom[k] += w * infl;
            }
            denom[k] -= w * s_i * (1.0 - aug);
            if ui == u && event_i {
                num[k] += w * infl;
            }
            num[k] -= w * s_i * (cum[k] - prev_lo) * (1.0 - aug);
            prev_lc = lc;
            prev_lo = cum[k];
        }
    }

    let mut values = Vec::with_capacity(kk);
    let mut cum_ratio = 0.0;
    for k in 0..kk {
        if denom[k] <= 0.0 {
            return Err(inp.grid[k]);
        }
        cum_ratio += num[k] / denom[k];
        values.push((-cum_ratio).exp());
    }
    Ok((values, cap_hits))
}

/// Sample grid values at the reporting times (each reporting time is a grid
/// member or the step value carries over).
fn sample_at(grid: &[f64], values: &[f64], at: &[f64]) -> Vec<f64> {
    at.iter()
        .map(|&t| match grid.partition_point(|&u| u <= t) {
            0 => 1.0,
            k => values[k - 1],
        })
        .collect()
}

/// Run every requested estimator and the TATE at the configured horizon.
pub fn run_transport(
    study: &StudyData,
    cfg: &TransportConfig,
) -> Result<TransportResults, EstimateError> {
    if cfg.estimators.is_empty() {
        return Err(EstimateError::NoEstimators);
    }
    study.require_trial()?;
    let trial = &study.trial;
    let max_time = trial.max_time();
    if cfg.horizon <= 0.0 || cfg.horizon > max_time {
        return Err(EstimateError::HorizonOutsideFollowup {
            horizon: cfg.horizon,
            max_time,
        });
    }
    for arm in Arm::BOTH {
        if !trial.arms.iter().any(|&a| a == arm) {
            return Err(EstimateError::MissingArm(arm));
        }
    }
    let needs_external = cfg.estimators.iter().any(|t| t.needs_external());
    if needs_external {
        study.require_external()?;
    }
    let needs_weights = cfg.estimators.iter().any(|t| t.needs_weights());
    let needs_cox = cfg.estimators.iter().any(|t| t.needs_cox_outcome());
    let needs_hare = cfg.estimators.iter().any(|t| t.needs_hare_outcome());

    let mut diagnostics = RunDiagnostics::default();

    // nuisance weights
    let spec;
    let weights: Option<WeightSet> = if needs_weights {
        let s = match &cfg.calibration {
            Some(s) => s.clone(),
            None => CalibrationSpec::first_moments(&study.feature_names, &study.external)?,
        };
        let with_ipsw = cfg.estimators.contains(&EstimatorTag::Ipsw);
        let w = estimate_weights(trial, &study.external, &s, with_ipsw)?;
        diagnostics.weight_diagnostics = Some(w.diagnostics.clone());
        spec = Some(s);
        Some(w)
    } else {
        spec = None;
        None
    };

    // outcome-model covariate selection (weighting models keep their own)
    let outcome_idx: Vec<usize> = match &cfg.outcome_features {
        None => (0..study.feature_names.len()).collect(),
        Some(names) => names
            .iter()
            .map(|f| {
                study
                    .feature_names
                    .iter()
                    .position(|g| g == f)
                    .ok_or_else(|| EstimateError::UnknownFeature(f.clone()))
            })
            .collect::<Result<_, _>>()?,
    };
    let x_outcome_trial = project_columns(trial.covariates.view(), &outcome_idx);
    let x_outcome_external = project_columns(study.external.covariates.view(), &outcome_idx);

    // outcome models per arm
    let mut cox_fits: [Option<CoxFit>; 2] = [None, None];
    let mut hare_fits: [Option<HareFit>; 2] = [None, None];
    for arm in Arm::BOTH {
        let sub = trial.arm_subset(arm);
        let x_arm = project_columns(sub.covariates.view(), &outcome_idx);
        if needs_cox {
            cox_fits[arm.index()] = Some(fit_cox(
                &sub.times,
                &sub.events,
                x_arm.view(),
                CoxResponse::Event,
                CoxOptions::default(),
            )?);
        }
        if needs_hare {
            hare_fits[arm.index()] =
                Some(fit_hare(&sub.times, &sub.events, x_arm.view(), &cfg.hare)?);
        }
    }

    // extrapolation screening for estimators that evaluate the outcome model
    // on external covariates
    if needs_external && (needs_cox || needs_hare) {
        let mut outside = 0usize;
        for j in 0..study.external.len() {
            let row = study.external.covariates.row(j);
            let mut out = false;
            for c in 0..trial.n_features() {
                let col = trial.covariates.column(c);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if row[c] < lo || row[c] > hi {
                    out = true;
                }
            }
            if out {
                outside += 1;
            }
        }
        if outside > 0 {
            diagnostics.notes.push(format!(
                "{outside} external record(s) outside the trial covariate range; \
                 outcome-model extrapolation"
            ));
        }
    }

    let g_trial = spec.as_ref().map(|s| s.design(trial.covariates.view()));

    let mut curves: Vec<SurvivalCurveEstimate> = Vec::new();
    for arm in Arm::BOTH {
        let grid = integration_grid(trial, arm, cfg.horizon);
        let report = report_times(trial, arm, cfg.horizon);
        let active: Vec<bool> = trial.arms.iter().map(|&a| a == arm).collect();
        let prop_arm: Option<Vec<f64>> = weights.as_ref().map(|w| {
            w.propensity
                .iter()
                .map(|&p| if arm == Arm::Experimental { p } else { 1.0 - p })
                .collect()
        });
        let censor_base: Option<Vec<f64>> = weights.as_ref().map(|w| {
            let fit = &w.censoring_fits[arm.index()];
            grid.iter().map(|&t| fit.baseline_cumhaz.value_at(t)).collect()
        });
        let censor_mult: Option<Vec<f64>> = weights.as_ref().map(|w| {
            let fit = &w.censoring_fits[arm.index()];
            let g = g_trial.as_ref().expect("design present with weights");
            (0..trial.len())
                .map(|i| {
                    let eta: f64 = fit
                        .coefficients
                        .iter()
                        .zip(g.row(i).iter())
                        .map(|(b, v)| b * v)
                        .sum();
                    eta.exp()
                })
                .collect()
        });

        for &tag in &cfg.estimators {
            let values = match tag {
                EstimatorTag::RctPh | EstimatorTag::RctHare => {
                    let outcome = outcome_for(tag, arm, &cox_fits, &hare_fits);
                    model_average_curve(&outcome, x_outcome_trial.view(), &report)?
                }
                EstimatorTag::OrPh | EstimatorTag::OrHare => {
                    let outcome = outcome_for(tag, arm, &cox_fits, &hare_fits);
                    model_average_curve(&outcome, x_outcome_external.view(), &report)?
                }
                EstimatorTag::Cw | EstimatorTag::Ipsw => {
                    let w = weights.as_ref().expect("weights fitted");
                    let sampling: &[f64] = if tag == EstimatorTag::Ipsw {
                        w.ipsw_weights.as_ref().expect("ipsw weights requested")
                    } else {
                        &w.calib_weights
                    };
                    let (vals, caps) = weighted_values(&WeightedInputs {
                        grid: &grid,
                        times: &trial.times,
                        active: &active,
                        sampling,
                        propensity_arm: prop_arm.as_ref().expect("propensity"),
                        censor_base: censor_base.as_ref().expect("censor base"),
                        censor_mult: censor_mult.as_ref().expect("censor mult"),
                        cap: cfg.censoring_inflation_cap,
                    });
                    diagnostics.censoring_cap_hits += caps;
                    sample_at(&grid, &vals, &report)
                }
                EstimatorTag::AcwPh | EstimatorTag::AcwHare => {
                    let w = weights.as_ref().expect("weights fitted");
                    let outcome = outcome_for(tag, arm, &cox_fits, &hare_fits);
                    let (vals, caps) = acw_values(&AcwInputs {
                        grid: &grid,
                        times: &trial.times,
                        events: &trial.events,
                        active: &active,
                        sampling: &w.calib_weights,
                        propensity_arm: prop_arm.as_ref().expect("propensity"),
                        censor_base: censor_base.as_ref().expect("censor base"),
                        censor_mult: censor_mult.as_ref().expect("censor mult"),
                        outcome: &outcome,
                        x_trial: x_outcome_trial.view(),
                        x_external: x_outcome_external.view(),
                        cap: cfg.censoring_inflation_cap,
                    })
                    .map_err(|time| EstimateError::NonPositiveDenominator {
                        time,
                        estimator: tag.as_str().to_string(),
                        arm,
                    })?;
                    diagnostics.censoring_cap_hits += caps;
                    sample_at(&grid, &vals, &report)
                }
            };
            let mut curve = SurvivalCurveEstimate {
                estimator: tag,
                arm,
                times: report.clone(),
                values,
                lower: None,
                upper: None,
            };
            if cfg.isotonize && curve.isotonize(1e-12) {
                diagnostics.isotonized.push(format!("{tag} arm {arm}"));
            } else if !cfg.isotonize {
                // still clamp into [0,1]; only monotonization is optional
                for v in curve.values.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            curves.push(curve);
        }
    }

    let mut tates = Vec::new();
    for &tag in &cfg.estimators {
        let treated = curves
            .iter()
            .find(|c| c.estimator == tag && c.arm == Arm::Experimental)
            .expect("curve built");
        let control = curves
            .iter()
            .find(|c| c.estimator == tag && c.arm == Arm::Control)
            .expect("curve built");
        tates.push((tag, estimate_tate(treated, control, cfg.horizon)));
    }

    Ok(TransportResults { curves, tates, diagnostics, weights })
}

fn project_columns(x: ArrayView2<'_, f64>, idx: &[usize]) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::<f64>::zeros((x.nrows(), idx.len()));
    for (jj, &j) in idx.iter().enumerate() {
        out.column_mut(jj).assign(&x.column(j));
    }
    out
}

fn outcome_for<'a>(
    tag: EstimatorTag,
    arm: Arm,
    cox: &'a [Option<CoxFit>; 2],
    hare: &'a [Option<HareFit>; 2],
) -> OutcomeModel<'a> {
    if tag.needs_hare_outcome() {
        OutcomeModel::Hare(hare[arm.index()].as_ref().expect("hare fitted"))
    } else {
        OutcomeModel::Cox(cox[arm.index()].as_ref().expect("cox fitted"))
    }
}
