use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::linalg;

use super::basis::{segment_moments, BasisTerm, HareBasis, SubjectSegments};
use super::{cumulative_hazard, HareError};

/// Stepwise-selection controls.
#[derive(Debug, Clone)]
pub struct HareConfig {
    /// Cap on the number of basis terms; `None` means min(12, events/10).
    pub max_terms: Option<usize>,
    pub covariate_knot_quantiles: Vec<f64>,
    pub time_knot_quantiles: Vec<f64>,
    /// Small-sample guard for the stepwise search.
    pub min_events: usize,
}

impl Default for HareConfig {
    fn default() -> Self {
        HareConfig {
            max_terms: None,
            covariate_knot_quantiles: vec![0.25, 0.5, 0.75],
            time_knot_quantiles: vec![0.25, 0.5, 0.75],
            min_events: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SelectionAction {
    Start,
    Add,
    Delete,
}

/// One entry of the stepwise trace.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionStep {
    pub action: SelectionAction,
    pub term: String,
    pub aic: f64,
}

/// Fitted hazard-regression model.
#[derive(Debug, Clone, Serialize)]
pub struct HareFit {
    pub basis: HareBasis,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub selection_trace: Vec<SelectionStep>,
    #[serde(skip)]
    pub information: Array2<f64>,
    pub converged: bool,
    pub n_iterations: usize,
}

impl HareFit {
    pub fn cumulative_hazard(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<f64, HareError> {
        cumulative_hazard(&self.basis, &self.coefficients, x, t)
    }
}

/// S(t | x) = exp(-Lambda^H(t | x)).
pub fn conditional_survival_hare(
    fit: &HareFit,
    x: ArrayView1<'_, f64>,
    t: f64,
) -> Result<f64, HareError> {
    Ok((-fit.cumulative_hazard(x, t)?).exp())
}

struct LikState {
    loglik: f64,
    score: Array1<f64>,
    /// Negative Hessian (positive semidefinite by concavity).
    information: Array2<f64>,
}

/// Full right-censored log likelihood
/// `sum_i [d_i log lambda(U_i|X_i) - Lambda(U_i|X_i)]`
/// with exact per-segment integrals of the score and information.
fn likelihood_state(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    basis: &HareBasis,
    beta: &[f64],
) -> LikState {
    let q = basis.len();
    let mut loglik = 0.0;
    let mut score = Array1::<f64>::zeros(q);
    let mut info = Array2::<f64>::zeros((q, q));
    for i in 0..times.len() {
        let xi = x.row(i);
        let segs = SubjectSegments::new(basis, xi);
        let u = times[i];
        if events[i] {
            let mut log_h = 0.0;
            for (k, term) in basis.terms.iter().enumerate() {
                let v = term.evaluate(u, xi);
                log_h += beta[k] * v;
                score[k] += v;
            }
            loglik += log_h;
        }
        for (lo, hi) in segs.clipped(u) {
            let (a, b, pq) = segs.local_form(beta, lo);
            let m = segment_moments(a, b, lo, hi);
            loglik -= m.j0;
            // int B_k e^{a+bu} du and int B_k B_l e^{a+bu} du, with the
            // time factors written as (p + q lo) + q (u - lo) per segment
            let shifted: Vec<(f64, f64)> =
                pq.iter().map(|&(p, qq)| (p + qq * lo, qq)).collect();
            for k in 0..q {
                let (pk, qk) = shifted[k];
                score[k] -= pk * m.j0 + qk * m.j1;
                for l in k..q {
                    let (pl, ql) = shifted[l];
                    info[[k, l]] +=
                        pk * pl * m.j0 + (pk * ql + pl * qk) * m.j1 + qk * ql * m.j2;
                }
            }
        }
    }
    for k in 0..q {
        for l in 0..k {
            info[[k, l]] = info[[l, k]];
        }
    }
    LikState { loglik, score, information: info }
}

/// Newton-maximized full likelihood over a fixed basis. The log hazard is
/// linear in the coefficients, so the likelihood is concave and step-halved
/// Newton converges to the global optimum.
pub fn fit_hare_fixed_basis(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    basis: HareBasis,
) -> Result<HareFit, HareError> {
    let n = times.len();
    if n == 0 {
        return Err(HareError::Empty);
    }
    if events.len() != n || x.nrows() != n {
        return Err(HareError::LengthMismatch);
    }
    if !basis.has_constant() {
        return Err(HareError::MissingConstant);
    }
    if let Some(needed) = basis.max_column() {
        if needed >= x.ncols() {
            return Err(HareError::CovariateLength { needed, got: x.ncols() });
        }
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events < basis.len() {
        return Err(HareError::TooFewEvents { events: n_events, terms: basis.len() });
    }

    // start at the exponential-rate solution for the constant term
    let total_time: f64 = times.iter().sum();
    let mut beta = vec![0.0; basis.len()];
    let const_idx = basis
        .terms
        .iter()
        .position(|t| *t == BasisTerm::constant())
        .expect("constant present");
    beta[const_idx] = (n_events as f64 / total_time.max(1e-300)).ln();

    let tol = 1e-8;
    let max_iter = 100;
    let mut state = likelihood_state(times, events, x, &basis, &beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let score_norm = state.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if score_norm < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let delta = linalg::solve_spd(&state.information, &state.score)
            .map_err(HareError::RankDeficient)?;
        // acceptance threshold scaled to the resolution of the likelihood sum
        let ll_resolution = 1e-12 * (1.0 + state.loglik.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                beta.iter().zip(delta.iter()).map(|(b, d)| b + step * d).collect();
            let cand_state = likelihood_state(times, events, x, &basis, &cand);
            if cand_state.loglik.is_finite() && cand_state.loglik >= state.loglik - ll_resolution {
                beta = cand;
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
    let score_norm = state.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !converged && score_norm >= 1e-5 {
        return Err(HareError::NotConverged(score_norm));
    }

    let k = basis.len() as f64;
    Ok(HareFit {
        aic: -2.0 * state.loglik + 2.0 * k,
        basis,
        coefficients: beta,
        log_likelihood: state.loglik,
        selection_trace: Vec::new(),
        information: state.information,
        converged: true,
        n_iterations: iterations,
    })
}

fn candidate_terms(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    config: &HareConfig,
) -> Vec<BasisTerm> {
    let p = x.ncols();
    let mut out = Vec::new();
    // covariate knots at configured quantiles
    for j in 0..p {
        let col: Vec<f64> = x.column(j).to_vec();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &q in &config.covariate_knot_quantiles {
            let k = crate::linalg::quantile(&col, q);
            if k > lo && k < hi {
                out.push(BasisTerm::covariate_knot(j, k));
            }
        }
    }
    // time knots at event-time quantiles
    let event_times: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    if !event_times.is_empty() {
        let lo = event_times.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = event_times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &q in &config.time_knot_quantiles {
            let k = crate::linalg::quantile(&event_times, q);
            if k > lo && k < hi {
                out.push(BasisTerm::time_knot(k));
            }
        }
    }
    // pairwise covariate products and covariate-time products
    for i in 0..p {
        for j in (i + 1)..p {
            out.push(BasisTerm::covariate_product(i, j));
        }
    }
    for j in 0..p {
        out.push(BasisTerm::time_interaction(j));
    }
    out.dedup();
    out
}

/// Greedy stepwise model selection: start from {constant, linear time,
/// linear main effects}; add the candidate with the best fitted AIC while it
/// improves and the term budget allows; then delete the least significant
/// terms while AIC improves. Returns the best-AIC model visited, with the
/// full trace recorded.
pub fn fit_hare(
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    config: &HareConfig,
) -> Result<HareFit, HareError> {
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events < config.min_events {
        return Err(HareError::TooFewEventsForSelection {
            required: config.min_events,
            found: n_events,
        });
    }
    let p = x.ncols();
    let max_terms = config.max_terms.unwrap_or_else(|| 12.min(n_events / 10).max(2));

    let mut terms = vec![BasisTerm::constant(), BasisTerm::time_linear()];
    for j in 0..p {
        terms.push(BasisTerm::covariate(j));
    }
    terms.truncate(max_terms.max(1));
    if terms.is_empty() || terms[0] != BasisTerm::constant() {
        terms.insert(0, BasisTerm::constant());
    }

    let mut trace = Vec::new();
    let mut current = fit_hare_fixed_basis(times, events, x, HareBasis::new(terms))?;
    trace.push(SelectionStep {
        action: SelectionAction::Start,
        term: format!("{} terms", current.basis.len()),
        aic: current.aic,
    });
    let mut best = current.clone();

    // addition phase
    let candidates = candidate_terms(times, events, x, config);
    loop {
        if current.basis.len() >= max_terms {
            break;
        }
        let mut best_step: Option<(HareFit, BasisTerm)> = None;
        for cand in &candidates {
            if current.basis.contains(cand) {
                continue;
            }
            let mut terms = current.basis.terms.clone();
            terms.push(cand.clone());
            match fit_hare_fixed_basis(times, events, x, HareBasis::new(terms)) {
                Ok(fit) => {
                    if fit.aic < best_step.as_ref().map_or(f64::INFINITY, |(f, _)| f.aic) {
                        best_step = Some((fit, cand.clone()));
                    }
                }
                // rank-deficient or non-converging candidates are skipped
                Err(_) => continue,
            }
        }
        match best_step {
            Some((fit, term)) if fit.aic < current.aic => {
                trace.push(SelectionStep {
                    action: SelectionAction::Add,
                    term: term.to_string(),
                    aic: fit.aic,
                });
                current = fit;
                if current.aic < best.aic {
                    best = current.clone();
                }
            }
            _ => break,
        }
    }

    // deletion phase: drop the Wald-least-significant term while AIC improves
    loop {
        if current.basis.len() <= 1 {
            break;
        }
        let var = match linalg::inverse_spd(&current.information) {
            Ok(v) => v,
            Err(_) => break,
        };
        let mut candidates: Vec<(usize, f64)> = current
            .basis
            .terms
            .iter()
            .enumerate()
            .filter(|(_, t)| **t != BasisTerm::constant())
            .map(|(k, _)| {
                let se = var[[k, k]].max(1e-300).sqrt();
                (k, (current.coefficients[k] / se).abs())
            })
            .collect();
        candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let Some(&(drop_idx, _)) = candidates.first() else { break };
        let mut terms = current.basis.terms.clone();
        let removed = terms.remove(drop_idx);
        match fit_hare_fixed_basis(times, events, x, HareBasis::new(terms)) {
            Ok(fit) if fit.aic < current.aic => {
                trace.push(SelectionStep {
                    action: SelectionAction::Delete,
                    term: removed.to_string(),
                    aic: fit.aic,
                });
                current = fit;
                if current.aic < best.aic {
                    best = current.clone();
                }
            }
            _ => break,
        }
    }

    best.selection_trace = trace;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hare::basis::cumulative_hazard_grid;
    use approx::assert_relative_eq;
    use ndarray::{arr1, Array2};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn exponential_data(n: usize, rate: f64, seed: u64) -> (Vec<f64>, Vec<bool>, Array2<f64>) {
        let mut rng = StdRng::seed_from_u64(seed);
        let times: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln() / rate).collect();
        let events = vec![true; n];
        let x = Array2::<f64>::zeros((n, 1));
        (times, events, x)
    }

    #[test]
    fn constant_basis_recovers_exponential_mle() {
        let (times, events, x) = exponential_data(4000, 0.5, 1);
        let basis = HareBasis::new(vec![BasisTerm::constant()]);
        let fit = fit_hare_fixed_basis(&times, &events, x.view(), basis).unwrap();
        // MLE of the exponential rate is events / total time, exactly
        let total: f64 = times.iter().sum();
        let mle = (4000.0 / total).ln();
        assert_relative_eq!(fit.coefficients[0], mle, epsilon = 1e-7);
        assert!((fit.coefficients[0] - 0.5f64.ln()).abs() < 0.1);
        assert!(fit.converged);
    }

    #[test]
    fn score_vanishes_at_optimum() {
        let (times, events, x) = exponential_data(300, 0.8, 3);
        let basis = HareBasis::new(vec![BasisTerm::constant(), BasisTerm::time_linear()]);
        let fit = fit_hare_fixed_basis(&times, &events, x.view(), basis.clone()).unwrap();
        let st = super::likelihood_state(&times, &events, x.view(), &basis, &fit.coefficients);
        let norm = st.score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(norm < 1e-6, "score norm {norm}");
        assert_relative_eq!(fit.aic, -2.0 * fit.log_likelihood + 4.0, epsilon = 1e-12);
    }

    fn crossing_data(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>, Array2<f64>) {
        // log lambda(t|x) = log 0.4 - 0.8 x + 1.2 x t
        let mut rng = StdRng::seed_from_u64(seed);
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        let mut x = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let g = rng.gen_bool(0.5);
            x[[i, 0]] = if g { 1.0 } else { 0.0 };
            let t = if g {
                let e: f64 = -rng.gen::<f64>().ln();
                (1.0 + 1.2 * e / (0.4 * (-0.8f64).exp())).ln() / 1.2
            } else {
                -rng.gen::<f64>().ln() / 0.4
            };
            let c = rng.gen::<f64>() * 5.0;
            times.push(t.min(c));
            events.push(t <= c);
        }
        (times, events, x)
    }

    #[test]
    fn recovers_time_interaction_coefficient() {
        let (times, events, x) = crossing_data(4000, 9);
        let basis = HareBasis::new(vec![
            BasisTerm::constant(),
            BasisTerm::covariate(0),
            BasisTerm::time_interaction(0),
        ]);
        let fit = fit_hare_fixed_basis(&times, &events, x.view(), basis).unwrap();
        let var = crate::linalg::inverse_spd(&fit.information).unwrap();
        let se = var[[2, 2]].sqrt();
        assert!(
            (fit.coefficients[2] - 1.2).abs() < 3.0 * se.max(0.05),
            "interaction {} (se {se})",
            fit.coefficients[2]
        );
    }

    #[test]
    fn likelihood_is_concave_on_random_pairs() {
        let (times, events, x) = crossing_data(200, 17);
        let basis = HareBasis::new(vec![
            BasisTerm::constant(),
            BasisTerm::time_linear(),
            BasisTerm::covariate(0),
        ]);
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let b1: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let b2: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mid: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| (a + b) / 2.0).collect();
            let l1 = super::likelihood_state(&times, &events, x.view(), &basis, &b1).loglik;
            let l2 = super::likelihood_state(&times, &events, x.view(), &basis, &b2).loglik;
            let lm = super::likelihood_state(&times, &events, x.view(), &basis, &mid).loglik;
            assert!(lm >= (l1 + l2) / 2.0 - 1e-9);
        }
    }

    #[test]
    fn survival_is_monotone_and_one_at_zero() {
        let (times, events, x) = crossing_data(600, 23);
        let cfg = HareConfig::default();
        let fit = fit_hare(&times, &events, x.view(), &cfg).unwrap();
        for xv in [0.0, 1.0] {
            let xi = arr1(&[xv]);
            assert_relative_eq!(
                conditional_survival_hare(&fit, xi.view(), 0.0).unwrap(),
                1.0
            );
            let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.08).collect();
            let cums =
                cumulative_hazard_grid(&fit.basis, &fit.coefficients, xi.view(), &grid).unwrap();
            let mut prev = -1e-12;
            for c in cums {
                assert!(c >= prev - 1e-10);
                prev = c;
            }
        }
    }

    #[test]
    fn no_time_terms_means_proportional_hazards() {
        let (times, events, x) = crossing_data(400, 29);
        let basis = HareBasis::new(vec![BasisTerm::constant(), BasisTerm::covariate(0)]);
        let fit = fit_hare_fixed_basis(&times, &events, x.view(), basis).unwrap();
        let x0 = arr1(&[0.0]);
        let x1 = arr1(&[1.0]);
        let mut ratios = Vec::new();
        for t in [0.3, 0.8, 1.5, 2.2] {
            let h0 = super::super::log_hazard(&fit.basis, &fit.coefficients, x0.view(), t);
            let h1 = super::super::log_hazard(&fit.basis, &fit.coefficients, x1.view(), t);
            ratios.push(h1 - h0);
        }
        for w in ratios.windows(2) {
            assert_relative_eq!(w[0], w[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn max_terms_at_start_size_disables_search() {
        let (times, events, x) = crossing_data(500, 31);
        let cfg = HareConfig { max_terms: Some(3), ..HareConfig::default() };
        let fit = fit_hare(&times, &events, x.view(), &cfg).unwrap();
        // start set is {constant, t, x0}; no additions allowed
        assert!(fit.basis.len() <= 3);
        let n_adds = fit
            .selection_trace
            .iter()
            .filter(|s| s.action == SelectionAction::Add)
            .count();
        assert_eq!(n_adds, 0);
    }

    #[test]
    fn stepwise_finds_crossing_interaction() {
        let (times, events, x) = crossing_data(1500, 37);
        let cfg = HareConfig::default();
        let fit = fit_hare(&times, &events, x.view(), &cfg).unwrap();
        assert!(
            fit.basis.has_time_dependence(),
            "expected a time-dependent term in {:?}",
            fit.basis.terms.iter().map(|t| t.to_string()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn serializes_to_structured_text() {
        let (times, events, x) = exponential_data(200, 0.6, 5);
        let basis = HareBasis::new(vec![BasisTerm::constant(), BasisTerm::time_linear()]);
        let fit = fit_hare_fixed_basis(&times, &events, x.view(), basis).unwrap();
        let text = serde_json::to_string_pretty(&fit).unwrap();
        assert!(text.contains("coefficients"));
        assert!(text.contains("terms"));
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed["basis"]["terms"].is_array());
    }
}
