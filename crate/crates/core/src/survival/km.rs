use serde::Serialize;

use super::SurvivalError;

/// Product-limit survival curve. Only times with at least one event appear;
/// the curve is right-continuous and starts at S(0) = 1.
#[derive(Debug, Clone, Serialize)]
pub struct KaplanMeierCurve {
    pub event_times: Vec<f64>,
    pub survival_values: Vec<f64>,
    pub at_risk_counts: Vec<f64>,
    pub event_counts: Vec<f64>,
}

impl KaplanMeierCurve {
    /// S(t), right-continuous step lookup.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.event_times.partition_point(|&u| u <= t) {
            0 => 1.0,
            k => self.survival_values[k - 1],
        }
    }

    /// Left limit S(t-).
    pub fn survival_before(&self, t: f64) -> f64 {
        match self.event_times.partition_point(|&u| u < t) {
            0 => 1.0,
            k => self.survival_values[k - 1],
        }
    }
}

/// Weighted Kaplan-Meier estimator. With weights, event and at-risk counts
/// are weight sums. Records must all come from the trial (one arm).
pub fn fit_kaplan_meier(
    times: &[f64],
    events: &[bool],
    weights: Option<&[f64]>,
) -> Result<KaplanMeierCurve, SurvivalError> {
    if times.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let n = times.len();
    if events.len() != n || weights.map_or(false, |w| w.len() != n) {
        return Err(SurvivalError::LengthMismatch {
            times: n,
            events: events.len(),
            weights: weights.map_or(n, |w| w.len()),
        });
    }
    for &t in times {
        if !t.is_finite() || t < 0.0 {
            return Err(SurvivalError::InvalidTime(t));
        }
    }
    if let Some(w) = weights {
        for &wi in w {
            if !wi.is_finite() || wi <= 0.0 {
                return Err(SurvivalError::InvalidWeight(wi));
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut at_risk: f64 = (0..n).map(weight).sum();
    let mut surv = 1.0;
    let mut curve = KaplanMeierCurve {
        event_times: Vec::new(),
        survival_values: Vec::new(),
        at_risk_counts: Vec::new(),
        event_counts: Vec::new(),
    };

    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let mut d = 0.0;
        let mut removed = 0.0;
        while k < n && times[order[k]] == t {
            let i = order[k];
            if events[i] {
                d += weight(i);
            }
            removed += weight(i);
            k += 1;
        }
        if d > 0.0 {
            surv *= 1.0 - d / at_risk;
            curve.event_times.push(t);
            curve.survival_values.push(surv);
            curve.at_risk_counts.push(at_risk);
            curve.event_counts.push(d);
        }
        at_risk -= removed;
    }
    Ok(curve)
}
