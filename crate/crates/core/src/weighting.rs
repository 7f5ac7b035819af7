//! Nuisance weights for transporting trial results: entropy-balancing
//! calibration weights solved through the Lagrangian dual, logistic treatment
//! propensity, inverse-probability-of-sampling weights, and per-arm Cox
//! models for the censoring distribution.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;
use thiserror::Error;

use crate::data::{Arm, ExternalData, TrialData};
use crate::linalg;
use crate::survival::{fit_cox, CoxFit, CoxOptions, CoxResponse, SurvivalError};

/// Lower clip for fitted probabilities; trimming is deliberately avoided so
/// the estimators keep the full sample.
pub const PROBABILITY_CLIP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("no external records to compute target moments from")]
    NoExternal,
    #[error("no trial records")]
    NoTrial,
    #[error("calibration function `{function}` is undefined on record {index}")]
    UndefinedFunction { function: String, index: usize },
    #[error(
        "target moment for `{function}` ({target:.6}) lies outside the trial range \
         [{lo:.6}, {hi:.6}]; the calibration constraint is unattainable"
    )]
    HullViolation { function: String, target: f64, lo: f64, hi: f64 },
    #[error(
        "calibration solver did not converge after {iterations} iterations \
         (constraint residual {residual:.3e})"
    )]
    CalibrationNotConverged { iterations: usize, residual: f64 },
    #[error("logistic model separation: fitted probabilities degenerate")]
    Separation,
    #[error("logistic response takes a single value; cannot fit")]
    DegenerateResponse,
    #[error("logistic solver did not converge (max |score| = {0:.3e})")]
    LogisticNotConverged(f64),
    #[error("censoring model: {0}")]
    Censoring(#[from] SurvivalError),
    #[error("design matrix column {0} is collinear or constant")]
    CollinearColumn(usize),
}

/// Covariate transform entering the calibration constraint vector g(X).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GFunction {
    /// First moment of one (expanded) covariate column.
    Linear(usize),
    /// Second raw moment of a column.
    Square(usize),
    /// Product of two columns.
    Product(usize, usize),
}

impl GFunction {
    pub fn evaluate(&self, x: ArrayView1<'_, f64>) -> f64 {
        match *self {
            GFunction::Linear(j) => x[j],
            GFunction::Square(j) => x[j] * x[j],
            GFunction::Product(j, k) => x[j] * x[k],
        }
    }

    fn max_column(&self) -> usize {
        match *self {
            GFunction::Linear(j) | GFunction::Square(j) => j,
            GFunction::Product(j, k) => j.max(k),
        }
    }
}

/// Named calibration functions together with their external target moments.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSpec {
    pub names: Vec<String>,
    pub functions: Vec<GFunction>,
    /// Design-weighted external means of each g, in function order.
    pub target_moments: Vec<f64>,
}

impl CalibrationSpec {
    /// First moments of every shared covariate column: the default g(X).
    pub fn first_moments(
        feature_names: &[String],
        external: &ExternalData,
    ) -> Result<Self, WeightError> {
        let functions: Vec<GFunction> =
            (0..feature_names.len()).map(GFunction::Linear).collect();
        let names = feature_names.to_vec();
        let target_moments = compute_target_moments(external, &functions, &names)?;
        Ok(CalibrationSpec { names, functions, target_moments })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Evaluate the g matrix over a sample (rows = records).
    pub fn design(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros((x.nrows(), self.len()));
        for i in 0..x.nrows() {
            for (j, f) in self.functions.iter().enumerate() {
                g[[i, j]] = f.evaluate(x.row(i));
            }
        }
        g
    }
}

/// Design-weighted external means of each calibration function.
pub fn compute_target_moments(
    external: &ExternalData,
    functions: &[GFunction],
    names: &[String],
) -> Result<Vec<f64>, WeightError> {
    if external.is_empty() {
        return Err(WeightError::NoExternal);
    }
    let p = external.covariates.ncols();
    let mut sums = vec![0.0; functions.len()];
    let mut wsum = 0.0;
    for i in 0..external.len() {
        let d = external.design_weights[i];
        wsum += d;
        let row = external.covariates.row(i);
        for (j, f) in functions.iter().enumerate() {
            if f.max_column() >= p {
                return Err(WeightError::UndefinedFunction {
                    function: names.get(j).cloned().unwrap_or_else(|| format!("g[{j}]")),
                    index: i,
                });
            }
            let v = f.evaluate(row);
            if !v.is_finite() {
                return Err(WeightError::UndefinedFunction {
                    function: names.get(j).cloned().unwrap_or_else(|| format!("g[{j}]")),
                    index: i,
                });
            }
            sums[j] += d * v;
        }
    }
    Ok(sums.into_iter().map(|s| s / wsum).collect())
}

/// Calibration solution: entropy weights and the dual multiplier.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSolution {
    /// Per-trial-subject weights, summing to one.
    pub weights: Vec<f64>,
    /// Dual multiplier; the implied loglinear sampling-score coefficient is
    /// its negation.
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub constraint_residual: f64,
}

/// Solve the entropy-balancing problem
/// `min sum w_i log w_i  s.t.  w >= 0, sum w = 1, sum w g(X_i) = g_tilde`
/// through its dual: the root of `U(lambda) = sum exp(lambda' g_i)(g_i - g~)`
/// is found by damped Newton on the equivalent convex potential
/// `psi(lambda) = sum exp{lambda' (g_i - g~)}`, whose gradient vanishes at the
/// same point and whose Hessian is symmetric positive definite. Constraints
/// are standardized internally for conditioning.
pub fn solve_calibration(
    trial: &TrialData,
    spec: &CalibrationSpec,
) -> Result<CalibrationSolution, WeightError> {
    let n = trial.len();
    if n == 0 {
        return Err(WeightError::NoTrial);
    }
    let q = spec.len();
    if q == 0 {
        return Ok(CalibrationSolution {
            weights: vec![1.0 / n as f64; n],
            lambda: Vec::new(),
            iterations: 0,
            constraint_residual: 0.0,
        });
    }
    let g = spec.design(trial.covariates.view());

    // feasibility precheck: each target inside the trial range
    for j in 0..q {
        let col = g.column(j);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let target = spec.target_moments[j];
        let span = (hi - lo).max(1e-12);
        let inside = if hi - lo <= 1e-12 {
            (target - lo).abs() <= 1e-9 * (1.0 + lo.abs())
        } else {
            target > lo - 1e-12 * span && target < hi + 1e-12 * span
        };
        if !inside {
            return Err(WeightError::HullViolation {
                function: spec.names.get(j).cloned().unwrap_or_else(|| format!("g[{j}]")),
                target,
                lo,
                hi,
            });
        }
    }

    // centered/standardized constraint rows h_i = (g_i - g~) / s
    let mut h = Array2::<f64>::zeros((n, q));
    let mut scale = vec![1.0; q];
    for j in 0..q {
        let mut var = 0.0;
        let mean = g.column(j).sum() / n as f64;
        for i in 0..n {
            let c = g[[i, j]] - mean;
            var += c * c;
        }
        var /= n as f64;
        scale[j] = var.sqrt().max(1e-12);
        for i in 0..n {
            h[[i, j]] = (g[[i, j]] - spec.target_moments[j]) / scale[j];
        }
    }

    let mut lambda = Array1::<f64>::zeros(q);
    let max_iterations = 100;
    let tol = 1e-10;
    let mut iterations = 0;

    // exp weights for current lambda, centered for stability; the potential
    // is tracked as log-sum-exp so line-search comparisons are free of the
    // lambda-dependent centering constant
    let compute = |lambda: &Array1<f64>| -> (Vec<f64>, Array1<f64>, Array2<f64>, f64) {
        let mut z: Vec<f64> = (0..n).map(|i| h.row(i).dot(lambda)).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in z.iter_mut() {
            *v = (*v - zmax).exp();
        }
        let mut grad = Array1::<f64>::zeros(q);
        let mut hess = Array2::<f64>::zeros((q, q));
        let mut sum = 0.0;
        for i in 0..n {
            let w = z[i];
            sum += w;
            for a in 0..q {
                grad[a] += w * h[[i, a]];
                for b in a..q {
                    hess[[a, b]] += w * h[[i, a]] * h[[i, b]];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[[a, b]] = hess[[b, a]];
            }
        }
        let log_psi = zmax + sum.ln();
        (z, grad, hess, log_psi)
    };

    let (mut z, mut grad, mut hess, mut log_psi) = compute(&lambda);
    while iterations < max_iterations {
        let wsum: f64 = z.iter().sum();
        let residual = grad.iter().fold(0.0f64, |m, v| m.max((v / wsum).abs()));
        if residual < tol {
            break;
        }
        iterations += 1;
        // ridge fallback keeps the step defined when constraints are collinear
        let step = match linalg::solve_spd(&hess, &grad) {
            Ok(s) => s,
            Err(_) => {
                let mut ridged = hess.clone();
                for a in 0..q {
                    ridged[[a, a]] += 1e-10 * (1.0 + hess[[a, a]].abs());
                }
                linalg::solve_spd(&ridged, &grad).map_err(WeightError::CollinearColumn)?
            }
        };
        let resolution = 1e-12 * (1.0 + log_psi.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &lambda - &(&step * t);
            let (cz, cg, ch, c_log_psi) = compute(&cand);
            if c_log_psi.is_finite() && c_log_psi <= log_psi + resolution {
                lambda = cand;
                z = cz;
                grad = cg;
                hess = ch;
                log_psi = c_log_psi;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let wsum: f64 = z.iter().sum();
    // report the residual on the raw (unstandardized) constraint scale
    let weights: Vec<f64> = z.iter().map(|v| v / wsum).collect();
    let mut raw_residual = 0.0f64;
    for j in 0..q {
        let mut s = 0.0;
        for i in 0..n {
            s += weights[i] * g[[i, j]];
        }
        raw_residual = raw_residual.max((s - spec.target_moments[j]).abs());
    }
    if raw_residual >= 1e-8 {
        return Err(WeightError::CalibrationNotConverged {
            iterations,
            residual: raw_residual,
        });
    }

    // undo the standardization: lambda_raw_j = lambda_j / scale_j
    let lambda_raw: Vec<f64> = lambda.iter().zip(&scale).map(|(l, s)| l / s).collect();
    Ok(CalibrationSolution {
        weights,
        lambda: lambda_raw,
        iterations,
        constraint_residual: raw_residual,
    })
}

/// Maximum-likelihood logistic regression fit (intercept plus given columns).
#[derive(Debug, Clone, Serialize)]
pub struct LogisticFit {
    /// Intercept followed by one coefficient per design column.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn probability(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut eta = self.coefficients[0];
        for (j, b) in self.coefficients[1..].iter().enumerate() {
            eta += b * x[j];
        }
        let p = 1.0 / (1.0 + (-eta).exp());
        p.clamp(PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
    }
}

/// IRLS Newton logistic regression with optional prior (design) weights.
pub fn fit_logistic(
    x: ArrayView2<'_, f64>,
    y: &[bool],
    prior_weights: Option<&[f64]>,
) -> Result<LogisticFit, WeightError> {
    let n = x.nrows();
    let p = x.ncols() + 1;
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == n {
        return Err(WeightError::DegenerateResponse);
    }
    // standardize columns for conditioning; coefficients mapped back at exit
    let mut means = vec![0.0; x.ncols()];
    let mut scales = vec![1.0; x.ncols()];
    for j in 0..x.ncols() {
        let col = x.column(j);
        let m = col.sum() / n as f64;
        let v = col.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / n as f64;
        means[j] = m;
        scales[j] = v.sqrt().max(1e-12);
    }
    let w = |i: usize| prior_weights.map_or(1.0, |ws| ws[i]);

    let mut beta = Array1::<f64>::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut score_norm = f64::INFINITY;
    while iterations < 100 {
        iterations += 1;
        let mut score = Array1::<f64>::zeros(p);
        let mut info = Array2::<f64>::zeros((p, p));
        let mut max_eta = 0.0f64;
        for i in 0..n {
            let mut eta = beta[0];
            for j in 0..x.ncols() {
                eta += beta[j + 1] * (x[[i, j]] - means[j]) / scales[j];
            }
            max_eta = max_eta.max(eta.abs());
            let mu = 1.0 / (1.0 + (-eta).exp());
            let resid = (if y[i] { 1.0 } else { 0.0 }) - mu;
            let wi = w(i);
            let v = (mu * (1.0 - mu)).max(1e-12);
            let mut row = vec![1.0];
            for j in 0..x.ncols() {
                row.push((x[[i, j]] - means[j]) / scales[j]);
            }
            for a in 0..p {
                score[a] += wi * resid * row[a];
                for b in a..p {
                    info[[a, b]] += wi * v * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[[a, b]] = info[[b, a]];
            }
        }
        score_norm = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if score_norm < 1e-10 {
            converged = true;
            break;
        }
        if max_eta > 36.0 {
            return Err(WeightError::Separation);
        }
        let delta = linalg::solve_spd(&info, &score).map_err(WeightError::CollinearColumn)?;
        let mut t = 1.0;
        loop {
            let norm: f64 = delta.iter().map(|d| (d * t).abs()).fold(0.0, f64::max);
            if norm < 20.0 || t < 1e-6 {
                break;
            }
            t *= 0.5;
        }
        beta = &beta + &(&delta * t);
    }
    if !converged && score_norm > 1e-6 {
        return Err(WeightError::LogisticNotConverged(score_norm));
    }

    // map back to the raw covariate scale
    let mut coefficients = vec![0.0; p];
    coefficients[0] = beta[0];
    for j in 0..x.ncols() {
        coefficients[j + 1] = beta[j + 1] / scales[j];
        coefficients[0] -= beta[j + 1] * means[j] / scales[j];
    }
    Ok(LogisticFit { coefficients, converged: true, iterations })
}

/// Treatment propensity model fitted on the calibration design g(X).
pub fn fit_propensity(
    trial: &TrialData,
    spec: &CalibrationSpec,
) -> Result<LogisticFit, WeightError> {
    let g = spec.design(trial.covariates.view());
    let y: Vec<bool> = trial.arms.iter().map(|&a| a == Arm::Experimental).collect();
    fit_logistic(g.view(), &y, None)
}

/// Inverse-probability-of-sampling weights from a pooled membership model:
/// trial subjects are weighted by the fitted odds of external membership,
/// normalized to sum to one over the trial sample.
pub fn ipsw_weights(
    trial: &TrialData,
    external: &ExternalData,
    spec: &CalibrationSpec,
) -> Result<(Vec<f64>, LogisticFit, Vec<String>), WeightError> {
    let n = trial.len();
    let m = external.len();
    if n == 0 {
        return Err(WeightError::NoTrial);
    }
    if m == 0 {
        return Err(WeightError::NoExternal);
    }
    let g_trial = spec.design(trial.covariates.view());
    let g_ext = spec.design(external.covariates.view());
    let q = spec.len();
    let mut x = Array2::<f64>::zeros((n + m, q));
    let mut y = Vec::with_capacity(n + m);
    let mut w = Vec::with_capacity(n + m);
    for i in 0..n {
        x.row_mut(i).assign(&g_trial.row(i));
        y.push(false);
        w.push(1.0);
    }
    for i in 0..m {
        x.row_mut(n + i).assign(&g_ext.row(i));
        y.push(true);
        w.push(external.design_weights[i]);
    }
    let fit = fit_logistic(x.view(), &y, Some(&w))?;
    let mut notes = Vec::new();
    let mut weights = Vec::with_capacity(n);
    let mut min_trial_prob = f64::INFINITY;
    for i in 0..n {
        let p_ext = fit.probability(g_trial.row(i));
        let p_trial = 1.0 - p_ext;
        min_trial_prob = min_trial_prob.min(p_trial);
        weights.push(p_ext / p_trial);
    }
    if min_trial_prob < 1e-3 {
        notes.push(format!(
            "ipsw: minimum fitted trial-membership probability {min_trial_prob:.2e}; \
             inverse-odds weights may be unstable"
        ));
    }
    let total: f64 = weights.iter().sum();
    for v in weights.iter_mut() {
        *v /= total;
    }
    Ok((weights, fit, notes))
}

/// Per-arm Cox models for the censoring process. An arm with no censoring
/// events yields the null fit, i.e. censoring survival identically one.
pub fn fit_censoring_models(
    trial: &TrialData,
    spec: &CalibrationSpec,
) -> Result<[CoxFit; 2], WeightError> {
    let mut fits = Vec::with_capacity(2);
    for arm in Arm::BOTH {
        let sub = trial.arm_subset(arm);
        let g = spec.design(sub.covariates.view());
        let n_censored = sub.events.iter().filter(|&&e| !e).count();
        if n_censored == 0 {
            fits.push(CoxFit::null(g.ncols()));
            continue;
        }
        // too few censoring events to support the model: fall back to the
        // covariate-free censoring hazard rather than failing the pipeline
        let fit = if n_censored <= g.ncols() {
            let empty = Array2::<f64>::zeros((sub.len(), 0));
            let base = fit_cox(
                &sub.times,
                &sub.events,
                empty.view(),
                CoxResponse::Censoring,
                CoxOptions::default(),
            )?;
            CoxFit {
                coefficients: vec![0.0; g.ncols()],
                baseline_cumhaz: base.baseline_cumhaz,
                log_partial_likelihood: base.log_partial_likelihood,
                information_matrix: Array2::zeros((g.ncols(), g.ncols())),
                converged: base.converged,
                n_iterations: base.n_iterations,
                n_events: base.n_events,
            }
        } else {
            fit_cox(
                &sub.times,
                &sub.events,
                g.view(),
                CoxResponse::Censoring,
                CoxOptions::default(),
            )?
        };
        fits.push(fit);
    }
    let [a, b]: [CoxFit; 2] = fits.try_into().expect("two arms");
    Ok([a, b])
}

/// Censoring survival S^C_a(t, x) = exp{-Lambda^C_a0(t) exp(gamma_a' x)},
/// where `x` is the calibration design row for the subject.
pub fn censoring_survival(fit: &CoxFit, g_row: ArrayView1<'_, f64>, t: f64) -> f64 {
    let eta: f64 = fit
        .coefficients
        .iter()
        .zip(g_row.iter())
        .map(|(b, v)| b * v)
        .sum();
    (-fit.baseline_cumhaz.value_at(t) * eta.exp()).exp()
}

/// All nuisance weights for one transport analysis, with solver diagnostics.
#[derive(Debug, Clone)]
pub struct WeightSet {
    /// Entropy-calibration weights per trial subject (sum to one).
    pub calib_weights: Vec<f64>,
    /// Dual solution; the loglinear sampling-score coefficient is `-lambda`.
    pub lambda: Vec<f64>,
    /// Fitted treatment propensity per trial subject, clipped away from 0/1.
    pub propensity: Vec<f64>,
    pub propensity_fit: LogisticFit,
    /// Normalized inverse-odds sampling weights, when requested.
    pub ipsw_weights: Option<Vec<f64>>,
    /// Censoring Cox fit per arm, on the calibration design.
    pub censoring_fits: [CoxFit; 2],
    pub diagnostics: WeightDiagnostics,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct WeightDiagnostics {
    pub calibration_iterations: usize,
    pub constraint_residual: f64,
    /// Effective sample size of the calibration weights, 1 / sum w^2.
    pub effective_sample_size: f64,
    pub notes: Vec<String>,
}

/// Estimate every nuisance weight needed by the weighted and augmented
/// transport estimators.
pub fn estimate_weights(
    trial: &TrialData,
    external: &ExternalData,
    spec: &CalibrationSpec,
    with_ipsw: bool,
) -> Result<WeightSet, WeightError> {
    let calibration = solve_calibration(trial, spec)?;
    let propensity_fit = fit_propensity(trial, spec)?;
    let g = spec.design(trial.covariates.view());
    let propensity: Vec<f64> =
        (0..trial.len()).map(|i| propensity_fit.probability(g.row(i))).collect();
    let censoring_fits = fit_censoring_models(trial, spec)?;

    let mut diagnostics = WeightDiagnostics {
        calibration_iterations: calibration.iterations,
        constraint_residual: calibration.constraint_residual,
        effective_sample_size: 1.0 / calibration.weights.iter().map(|w| w * w).sum::<f64>(),
        notes: Vec::new(),
    };

    let ipsw = if with_ipsw {
        let (w, _fit, notes) = ipsw_weights(trial, external, spec)?;
        diagnostics.notes.extend(notes);
        Some(w)
    } else {
        None
    };

    Ok(WeightSet {
        calib_weights: calibration.weights,
        lambda: calibration.lambda,
        propensity,
        propensity_fit,
        ipsw_weights: ipsw,
        censoring_fits,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, StudyData, SubjectRecord};
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn external_from(values: &[f64], weights: &[f64]) -> ExternalData {
        let mut x = Array2::<f64>::zeros((values.len(), 1));
        for (i, &v) in values.iter().enumerate() {
            x[[i, 0]] = v;
        }
        ExternalData { covariates: x, design_weights: weights.to_vec() }
    }

    fn trial_from(xs: &[f64], arms: &[Arm]) -> TrialData {
        let mut x = Array2::<f64>::zeros((xs.len(), 1));
        for (i, &v) in xs.iter().enumerate() {
            x[[i, 0]] = v;
        }
        TrialData {
            times: vec![1.0; xs.len()],
            events: vec![true; xs.len()],
            arms: arms.to_vec(),
            covariates: x,
        }
    }

    #[test]
    fn target_moments_unweighted_mean() {
        let ext = external_from(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        let m = compute_target_moments(&ext, &[GFunction::Linear(0)], &["x".into()]).unwrap();
        assert_relative_eq!(m[0], 2.0);
    }

    #[test]
    fn target_moments_design_weighted() {
        let ext = external_from(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]);
        let m = compute_target_moments(&ext, &[GFunction::Linear(0)], &["x".into()]).unwrap();
        assert_relative_eq!(m[0], 9.0 / 4.0);
    }

    #[test]
    fn undefined_function_is_named() {
        let ext = external_from(&[1.0], &[1.0]);
        let err =
            compute_target_moments(&ext, &[GFunction::Linear(3)], &["drug".into()]).unwrap_err();
        match err {
            WeightError::UndefinedFunction { function, .. } => assert_eq!(function, "drug"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn calibration_identity_when_targets_match() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; 10]);
        let mean = xs.iter().sum::<f64>() / 10.0;
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![mean],
        };
        let sol = solve_calibration(&trial, &spec).unwrap();
        for w in &sol.weights {
            assert_relative_eq!(*w, 0.1, epsilon = 1e-9);
        }
        assert!(sol.lambda[0].abs() < 1e-8);
    }

    #[test]
    fn calibration_two_point_closed_form() {
        // x in {0,1}, 50/50 split, target mean 0.75:
        // weights on x=1 each 0.75/(n/2), on x=0 each 0.25/(n/2)
        let n = 8;
        let xs: Vec<f64> = (0..n).map(|i| if i < n / 2 { 0.0 } else { 1.0 }).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; n]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.75],
        };
        let sol = solve_calibration(&trial, &spec).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let expect = if x > 0.5 { 0.75 / 4.0 } else { 0.25 / 4.0 };
            assert_relative_eq!(sol.weights[i], expect, epsilon = 1e-9);
        }
        let balance: f64 = sol.weights.iter().zip(&xs).map(|(w, x)| w * x).sum();
        assert_relative_eq!(balance, 0.75, epsilon = 1e-10);
    }

    #[test]
    fn hull_violation_names_constraint() {
        let xs = vec![0.0, 0.0, 1.0, 1.0];
        let trial = trial_from(&xs, &vec![Arm::Control; 4]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![1.5],
        };
        match solve_calibration(&trial, &spec).unwrap_err() {
            WeightError::HullViolation { function, target, .. } => {
                assert_eq!(function, "x");
                assert_relative_eq!(target, 1.5);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn calibration_constraints_hold_on_simulated_shift() {
        let mut rng = StdRng::seed_from_u64(99);
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; n]);
        let mut x2 = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            x2[[i, 0]] = xs[i];
            x2[[i, 1]] = xs[i] * xs[i];
            x2[[i, 2]] = (xs[i] > 0.3) as i32 as f64;
        }
        let trial = TrialData { covariates: x2, ..trial };
        let spec = CalibrationSpec {
            names: vec!["x".into(), "x2".into(), "ind".into()],
            functions: vec![GFunction::Linear(0), GFunction::Linear(1), GFunction::Linear(2)],
            target_moments: vec![0.2, 0.5, 0.45],
        };
        let sol = solve_calibration(&trial, &spec).unwrap();
        assert_relative_eq!(sol.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(sol.constraint_residual < 1e-8);
        assert!(sol.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn dual_matches_loglinear_form() {
        // lambda-hat equals the negated loglinear sampling coefficient:
        // weights rebuilt as exp(-eta' g)/sum exp(-eta' g) with eta = -lambda
        let mut rng = StdRng::seed_from_u64(3);
        let n = 120;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; n]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.6],
        };
        let sol = solve_calibration(&trial, &spec).unwrap();
        let eta: Vec<f64> = sol.lambda.iter().map(|l| -l).collect();
        let mut rebuilt: Vec<f64> = xs.iter().map(|&x| (-eta[0] * x).exp()).collect();
        let s: f64 = rebuilt.iter().sum();
        for v in rebuilt.iter_mut() {
            *v /= s;
        }
        for (a, b) in sol.weights.iter().zip(&rebuilt) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn calibration_invariant_to_affine_rescaling() {
        let mut rng = StdRng::seed_from_u64(17);
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; n]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![2.5],
        };
        let sol = solve_calibration(&trial, &spec).unwrap();
        // rescale g and the target by the same affine map
        let xs2: Vec<f64> = xs.iter().map(|&x| 10.0 * x - 7.0).collect();
        let trial2 = trial_from(&xs2, &vec![Arm::Control; n]);
        let spec2 = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![10.0 * 2.5 - 7.0],
        };
        let sol2 = solve_calibration(&trial2, &spec2).unwrap();
        for (a, b) in sol.weights.iter().zip(&sol2.weights) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn propensity_near_half_under_randomization() {
        let mut rng = StdRng::seed_from_u64(8);
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let arms: Vec<Arm> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { Arm::Experimental } else { Arm::Control })
            .collect();
        let trial = trial_from(&xs, &arms);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.5],
        };
        let fit = fit_propensity(&trial, &spec).unwrap();
        assert!(fit.coefficients[0].abs() < 0.2, "intercept {}", fit.coefficients[0]);
        assert!(fit.coefficients[1].abs() < 0.3, "slope {}", fit.coefficients[1]);
        let g = spec.design(trial.covariates.view());
        let mean_p: f64 = (0..n).map(|i| fit.probability(g.row(i))).sum::<f64>() / n as f64;
        assert!((mean_p - 0.5).abs() < 0.05);
    }

    #[test]
    fn one_armed_trial_is_separation_like_error() {
        let trial = trial_from(&[0.0, 1.0, 0.5], &vec![Arm::Experimental; 3]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.5],
        };
        assert!(matches!(
            fit_propensity(&trial, &spec),
            Err(WeightError::DegenerateResponse)
        ));
    }

    #[test]
    fn logistic_recovers_known_coefficients() {
        let mut rng = StdRng::seed_from_u64(12);
        let n = 5000;
        let mut x = Array2::<f64>::zeros((n, 1));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xi: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            x[[i, 0]] = xi;
            let p = 1.0 / (1.0 + (-(0.3 + 1.1 * xi)).exp());
            y.push(rng.gen::<f64>() < p);
        }
        let fit = fit_logistic(x.view(), &y, None).unwrap();
        // 3 standard errors is roughly 0.1-0.2 at this size
        assert!((fit.coefficients[0] - 0.3).abs() < 0.15);
        assert!((fit.coefficients[1] - 1.1).abs() < 0.25);
    }

    #[test]
    fn ipsw_uniform_without_shift() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 800;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let es: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let trial = trial_from(&xs, &vec![Arm::Control; n]);
        let ext = external_from(&es, &vec![1.0; n]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.5],
        };
        let (w, _, notes) = ipsw_weights(&trial, &ext, &spec).unwrap();
        assert!(notes.is_empty());
        let uniform = 1.0 / n as f64;
        for &wi in &w {
            assert!((wi - uniform).abs() < uniform * 0.5, "weight {wi}");
        }
    }

    #[test]
    fn ipsw_binary_shift_matches_analytic_odds() {
        // trial: 60/40 split on x=1; external: 30/70; the saturated logistic
        // reproduces the exact cell odds m_x/n_x up to normalization
        let trial_x: Vec<f64> = std::iter::repeat(1.0)
            .take(60)
            .chain(std::iter::repeat(0.0).take(40))
            .collect();
        let ext_x: Vec<f64> = std::iter::repeat(1.0)
            .take(30)
            .chain(std::iter::repeat(0.0).take(70))
            .collect();
        let trial = trial_from(&trial_x, &vec![Arm::Control; 100]);
        let ext = external_from(&ext_x, &vec![1.0; 100]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.3],
        };
        let (w, _, _) = ipsw_weights(&trial, &ext, &spec).unwrap();
        let odds1: f64 = 30.0 / 60.0;
        let odds0: f64 = 70.0 / 40.0;
        let total = 60.0 * odds1 + 40.0 * odds0;
        for (i, &x) in trial_x.iter().enumerate() {
            let expect = if x > 0.5 { odds1 / total } else { odds0 / total };
            assert_relative_eq!(w[i], expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn extreme_shift_is_flagged() {
        let mut rng = StdRng::seed_from_u64(6);
        let n = 400;
        let trial_x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let ext_x: Vec<f64> = (0..n).map(|_| 6.0 + rng.gen::<f64>()).collect();
        let trial = trial_from(&trial_x, &vec![Arm::Control; n]);
        let ext = external_from(&ext_x, &vec![1.0; n]);
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![6.5],
        };
        match ipsw_weights(&trial, &ext, &spec) {
            Ok((_, _, notes)) => assert!(!notes.is_empty()),
            // complete separation is also an acceptable outcome here
            Err(WeightError::Separation) => {}
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn censoring_survival_trivials() {
        // no censoring in the arm: S^C identically one
        let records = vec![
            SubjectRecord::trial(1.0, true, Arm::Control, vec![0.1]),
            SubjectRecord::trial(2.0, true, Arm::Control, vec![0.7]),
            SubjectRecord::trial(1.5, true, Arm::Experimental, vec![0.4]),
            SubjectRecord::trial(2.5, false, Arm::Experimental, vec![0.9]),
            SubjectRecord::trial(1.2, true, Arm::Experimental, vec![0.2]),
            SubjectRecord::trial(0.7, true, Arm::Experimental, vec![0.6]),
        ];
        let study = StudyData::from_records(&records, vec!["x".into()]).unwrap();
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.5],
        };
        let fits = fit_censoring_models(&study.trial, &spec).unwrap();
        let g = ndarray::arr1(&[0.4]);
        assert_relative_eq!(censoring_survival(&fits[0], g.view(), 5.0), 1.0);
        assert_relative_eq!(censoring_survival(&fits[1], g.view(), 0.0), 1.0);
    }

    #[test]
    fn administrative_censoring_keeps_sc_one_before_cutoff() {
        let tau = 2.0;
        let mut records = Vec::new();
        for i in 0..40 {
            let t = 0.05 + (i as f64) * 0.04;
            if t < tau {
                records.push(SubjectRecord::trial(t, true, Arm::Control, vec![t.fract()]));
            }
        }
        for i in 0..10 {
            records.push(SubjectRecord::trial(tau, false, Arm::Control, vec![(i as f64) / 10.0]));
        }
        records.push(SubjectRecord::trial(0.5, true, Arm::Experimental, vec![0.5]));
        records.push(SubjectRecord::trial(0.6, true, Arm::Experimental, vec![0.1]));
        let study = StudyData::from_records(&records, vec!["x".into()]).unwrap();
        let spec = CalibrationSpec {
            names: vec!["x".into()],
            functions: vec![GFunction::Linear(0)],
            target_moments: vec![0.5],
        };
        let fits = fit_censoring_models(&study.trial, &spec).unwrap();
        let g = ndarray::arr1(&[0.3]);
        for t in [0.0, 0.5, 1.0, 1.9] {
            assert_relative_eq!(censoring_survival(&fits[0], g.view(), t), 1.0);
        }
        assert!(censoring_survival(&fits[0], g.view(), tau) < 1.0);
    }
}
