use ndarray::{Array1, Array2, ArrayView2};
use serde::Serialize;

use crate::linalg;

use super::SurvivalError;

/// Which duration process a Cox model targets. `Censoring` swaps the role of
/// the event indicator so the censoring distribution is modeled, valid under
/// noninformative censoring given covariates and arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoxResponse {
    Event,
    Censoring,
}

/// Solver controls for the partial-likelihood Newton iteration.
#[derive(Debug, Clone, Copy)]
pub struct CoxOptions {
    /// Convergence tolerance on the sup-norm of the score.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions { tol: 1e-9, max_iterations: 50 }
    }
}

/// Step-function baseline cumulative hazard (Breslow estimator).
#[derive(Debug, Clone, Default, Serialize)]
pub struct BaselineCumHaz {
    /// Jump times, strictly increasing.
    pub times: Vec<f64>,
    /// Cumulative hazard at each jump time.
    pub values: Vec<f64>,
}

impl BaselineCumHaz {
    /// Right-continuous step lookup; constant after the last jump.
    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.values[k - 1],
        }
    }

    /// Left limit at `t`.
    pub fn value_before(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u < t) {
            0 => 0.0,
            k => self.values[k - 1],
        }
    }
}

/// Fitted Cox proportional-hazards model.
#[derive(Debug, Clone, Serialize)]
pub struct CoxFit {
    pub coefficients: Vec<f64>,
    pub baseline_cumhaz: BaselineCumHaz,
    pub log_partial_likelihood: f64,
    /// Observed information (negative Hessian of the partial likelihood).
    #[serde(skip)]
    pub information_matrix: Array2<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    pub n_events: usize,
}

impl CoxFit {
    /// Fit with zero coefficients and zero baseline hazard. Stands in for a
    /// process with no observed events (e.g. an arm without censoring when
    /// modeling the censoring distribution).
    pub fn null(p: usize) -> CoxFit {
        CoxFit {
            coefficients: vec![0.0; p],
            baseline_cumhaz: BaselineCumHaz::default(),
            log_partial_likelihood: 0.0,
            information_matrix: Array2::zeros((p, p)),
            converged: true,
            n_iterations: 0,
            n_events: 0,
        }
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64, SurvivalError> {
        if x.len() != self.coefficients.len() {
            return Err(SurvivalError::CovariateLength {
                expected: self.coefficients.len(),
                got: x.len(),
            });
        }
        Ok(self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    /// Lambda(t | x) = Lambda_0(t) * exp(beta' x).
    pub fn cumulative_hazard(&self, x: &[f64], t: f64) -> Result<f64, SurvivalError> {
        Ok(self.baseline_cumhaz.value_at(t) * self.linear_predictor(x)?.exp())
    }
}

/// Conditional survival S(t | x) = exp{-Lambda_0(t) exp(beta' x)}.
pub fn conditional_survival(fit: &CoxFit, x: &[f64], t: f64) -> Result<f64, SurvivalError> {
    Ok((-fit.cumulative_hazard(x, t)?).exp())
}

struct PartialLikState {
    loglik: f64,
    score: Array1<f64>,
    information: Array2<f64>,
}

/// Kahan-compensated accumulator. The risk-set sums are built incrementally
/// over thousands of terms and their rounding drift otherwise dominates the
/// score near the optimum, stalling Newton above the 1e-9 tolerance.
#[derive(Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    #[inline]
    fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum
    }
}

/// One backward sweep over the risk sets: Breslow-tie partial likelihood,
/// score, and observed information at `beta`.
fn partial_lik(
    order: &[usize],
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    beta: &Array1<f64>,
) -> PartialLikState {
    let n = order.len();
    let p = x.ncols();
    // the partial likelihood is invariant to a common shift of the linear
    // predictor; center by the max to keep the exponentials bounded
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).dot(beta)).collect();
    let eta_max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut s0 = KahanSum::default();
    let mut s1 = vec![KahanSum::default(); p];
    let mut s2 = Array2::<f64>::zeros((p, p));
    let mut loglik = 0.0;
    let mut score = vec![KahanSum::default(); p];
    let mut information = Array2::<f64>::zeros((p, p));

    let mut k = n;
    while k > 0 {
        // pull in everyone tied at this time, then process its events
        let t = times[order[k - 1]];
        let start = k;
        while k > 0 && times[order[k - 1]] == t {
            let i = order[k - 1];
            let w = (eta[i] - eta_max).exp();
            s0.add(w);
            for a in 0..p {
                let xa = x[[i, a]];
                s1[a].add(w * xa);
                for b in a..p {
                    s2[[a, b]] += w * xa * x[[i, b]];
                }
            }
            k -= 1;
        }
        for idx in k..start {
            let i = order[idx];
            if !events[i] {
                continue;
            }
            let s0v = s0.value();
            loglik += (eta[i] - eta_max) - s0v.ln();
            for a in 0..p {
                let xbar_a = s1[a].value() / s0v;
                score[a].add(x[[i, a]] - xbar_a);
                for b in a..p {
                    information[[a, b]] += s2[[a, b]] / s0v - xbar_a * (s1[b].value() / s0v);
                }
            }
        }
    }
    let score = Array1::from_iter(score.iter().map(|s| s.value()));
    for a in 0..p {
        for b in 0..a {
            information[[a, b]] = information[[b, a]];
        }
    }
    PartialLikState { loglik, score, information }
}

/// Columns with (numerically) no pivot in the information matrix.
fn singular_columns(info: &Array2<f64>) -> Vec<usize> {
    let p = info.nrows();
    let scale = (0..p).map(|j| info[[j, j]].abs()).fold(0.0, f64::max).max(1.0);
    let mut cols: Vec<usize> = (0..p).filter(|&j| info[[j, j]] <= scale * 1e-12).collect();
    if cols.is_empty() {
        if let Err(j) = linalg::cholesky_lower(info) {
            cols.push(j);
        }
    }
    cols
}

/// Newton-maximized Breslow partial likelihood with step-halving, plus the
/// Breslow estimator of the baseline cumulative hazard. All records must come
/// from a single trial arm; `response` selects the event or censoring process.
pub fn fit_cox(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    response: CoxResponse,
    opts: CoxOptions,
) -> Result<CoxFit, SurvivalError> {
    let n = times.len();
    if n == 0 {
        return Err(SurvivalError::Empty);
    }
    if events.len() != n || x.nrows() != n {
        return Err(SurvivalError::LengthMismatch {
            times: n,
            events: events.len(),
            weights: x.nrows(),
        });
    }
    let flipped: Vec<bool>;
    let events: &[bool] = match response {
        CoxResponse::Event => events,
        CoxResponse::Censoring => {
            flipped = events.iter().map(|&e| !e).collect();
            &flipped
        }
    };
    let p = x.ncols();
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(SurvivalError::NoEvents);
    }
    if p >= n_events {
        return Err(SurvivalError::TooFewEvents { p, events: n_events });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    let mut beta = Array1::<f64>::zeros(p);
    let mut state = partial_lik(&order, times, events, x, &beta);
    let mut converged = p == 0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let score_norm = state.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if score_norm < opts.tol {
            converged = true;
            break;
        }
        let delta = linalg::solve_spd(&state.information, &state.score)
            .map_err(|_| SurvivalError::SingularInformation {
                columns: singular_columns(&state.information),
            })?;
        // step-halving keeps the partial likelihood non-decreasing, up to
        // the resolution of the log-likelihood sum itself
        let ll_resolution = 1e-12 * (1.0 + state.loglik.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + &(&delta * step);
            let cand_state = partial_lik(&order, times, events, x, &candidate);
            if cand_state.loglik.is_finite() && cand_state.loglik >= state.loglik - ll_resolution {
                beta = candidate;
                state = cand_state;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let score_norm = state.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if score_norm < opts.tol {
            converged = true;
        } else {
            return Err(SurvivalError::NotConverged {
                iterations,
                score_norm,
                last_coefficients: beta.to_vec(),
            });
        }
    }

    // Breslow baseline at beta-hat: jump d_k / sum_{risk} exp(eta_j). Risk
    // sums accumulate backward over time (no subtraction drift), with
    // centered exponentials rescaled at the end.
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).dot(&beta)).collect();
    let eta_max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rescale = (-eta_max).exp();
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new(); // (time, d, risk sum)
    {
        let mut s0 = KahanSum::default();
        let mut k = n;
        while k > 0 {
            let t = times[order[k - 1]];
            let mut d = 0.0;
            while k > 0 && times[order[k - 1]] == t {
                let i = order[k - 1];
                s0.add((eta[i] - eta_max).exp());
                if events[i] {
                    d += 1.0;
                }
                k -= 1;
            }
            if d > 0.0 {
                blocks.push((t, d, s0.value()));
            }
        }
    }
    blocks.reverse();
    let mut baseline = BaselineCumHaz::default();
    let mut cum = 0.0;
    for (t, d, risk_sum) in blocks {
        cum += d / risk_sum * rescale;
        baseline.times.push(t);
        baseline.values.push(cum);
    }

    Ok(CoxFit {
        coefficients: beta.to_vec(),
        baseline_cumhaz: baseline,
        log_partial_likelihood: state.loglik,
        information_matrix: state.information,
        converged,
        n_iterations: iterations,
        n_events,
    })
}

/// Schoenfeld internals need the per-event risk-set means; expose the sweep.
pub(super) fn risk_set_means(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    beta: &[f64],
) -> Vec<(usize, Vec<f64>)> {
    let n = times.len();
    let p = x.ncols();
    let beta = Array1::from(beta.to_vec());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let eta: Vec<f64> = (0..n).map(|i| x.row(i).dot(&beta)).collect();
    let eta_max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut s0 = KahanSum::default();
    let mut s1 = vec![KahanSum::default(); p];
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut k = n;
    while k > 0 {
        let t = times[order[k - 1]];
        let start = k;
        while k > 0 && times[order[k - 1]] == t {
            let i = order[k - 1];
            let w = (eta[i] - eta_max).exp();
            s0.add(w);
            for a in 0..p {
                s1[a].add(w * x[[i, a]]);
            }
            k -= 1;
        }
        for idx in k..start {
            let i = order[idx];
            if events[i] {
                out.push((i, s1.iter().map(|v| v.value() / s0.value()).collect()));
            }
        }
    }
    // events in increasing time order
    out.reverse();
    out
}
