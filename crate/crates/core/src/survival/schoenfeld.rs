use ndarray::{Array1, Array2, ArrayView2};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::linalg;

use super::cox::{risk_set_means, CoxFit};
use super::km::fit_kaplan_meier;
use super::SurvivalError;

/// Event-time transform used when regressing scaled Schoenfeld residuals on
/// time. The Kaplan-Meier transform is the default; it maps the time axis
/// through 1 - S(t-) of the pooled sample, which guards against extreme
/// outliers in the raw time scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TimeTransform {
    KaplanMeier,
    Identity,
    Rank,
}

impl TimeTransform {
    pub fn tag(self) -> &'static str {
        match self {
            TimeTransform::KaplanMeier => "km",
            TimeTransform::Identity => "identity",
            TimeTransform::Rank => "rank",
        }
    }
}

/// Grambsch-Therneau proportional-hazards score test.
#[derive(Debug, Clone, Serialize)]
pub struct PhTestResult {
    pub per_covariate_chisq: Vec<f64>,
    pub per_covariate_p: Vec<f64>,
    pub global_chisq: f64,
    pub global_p: f64,
    pub time_transform_tag: String,
}

/// Score test for proportionality from the trend of Schoenfeld residuals
/// against transformed event time, using the average-information
/// approximation (per-covariate 1-df tests and a global p-df test).
pub fn schoenfeld_ph_test(
    fit: &CoxFit,
    times: &[f64],
    events: &[bool],
    x: ArrayView2<'_, f64>,
    transform: TimeTransform,
) -> Result<PhTestResult, SurvivalError> {
    if !fit.converged {
        return Err(SurvivalError::FitNotConverged);
    }
    let p = fit.coefficients.len();
    if p == 0 || x.ncols() != p {
        return Err(SurvivalError::CovariateLength { expected: p.max(1), got: x.ncols() });
    }
    let d = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .count();
    if d < 2 {
        return Err(SurvivalError::TooFewEventsForTest(d));
    }

    // unscaled Schoenfeld residuals, events in increasing time order
    let means = risk_set_means(times, events, x, &fit.coefficients);
    let mut resid = Array2::<f64>::zeros((d, p));
    let mut event_times = Vec::with_capacity(d);
    for (k, (i, xbar)) in means.iter().enumerate() {
        for j in 0..p {
            resid[[k, j]] = x[[*i, j]] - xbar[j];
        }
        event_times.push(times[*i]);
    }

    // transformed event times, centered
    let g: Vec<f64> = match transform {
        TimeTransform::Identity => event_times.clone(),
        TimeTransform::Rank => average_ranks(&event_times),
        TimeTransform::KaplanMeier => {
            let km = fit_kaplan_meier(times, events, None)?;
            event_times.iter().map(|&t| 1.0 - km.survival_before(t)).collect()
        }
    };
    let g_mean = g.iter().sum::<f64>() / d as f64;
    let gg: Vec<f64> = g.iter().map(|v| v - g_mean).collect();
    let ss_g: f64 = gg.iter().map(|v| v * v).sum();

    let var = linalg::inverse_spd(&fit.information_matrix).map_err(|j| {
        SurvivalError::SingularInformation { columns: vec![j] }
    })?;

    // u = sum_k g_k r_k; per-covariate statistic uses the scaled residuals
    let mut u = Array1::<f64>::zeros(p);
    for k in 0..d {
        for j in 0..p {
            u[j] += gg[k] * resid[[k, j]];
        }
    }
    let d_f = d as f64;
    let mut per_chisq = Vec::with_capacity(p);
    let mut per_p = Vec::with_capacity(p);
    let chi1 = ChiSquared::new(1.0).expect("df 1");
    for j in 0..p {
        // sum_k g_k (r_k' V)_j * d, squared, over V_jj * d * sum g^2
        let mut t_j = 0.0;
        for k in 0..d {
            let mut rv = 0.0;
            for l in 0..p {
                rv += resid[[k, l]] * var[[l, j]];
            }
            t_j += gg[k] * rv;
        }
        t_j *= d_f;
        let z = t_j * t_j / (var[[j, j]] * d_f * ss_g);
        per_chisq.push(z);
        per_p.push(1.0 - chi1.cdf(z));
    }

    let global = d_f * u.dot(&var.dot(&u)) / ss_g;
    let chip = ChiSquared::new(p as f64).expect("df p");
    let global_p = 1.0 - chip.cdf(global);

    Ok(PhTestResult {
        per_covariate_chisq: per_chisq,
        per_covariate_p: per_p,
        global_chisq: global,
        global_p,
        time_transform_tag: transform.tag().to_string(),
    })
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
        let avg = (k + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}
