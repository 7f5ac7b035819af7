use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::Arm;

/// Estimator menu; the tags mirror the emitted table and curve-file names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EstimatorTag {
    OrPh,
    OrHare,
    Ipsw,
    Cw,
    AcwPh,
    AcwHare,
    RctPh,
    RctHare,
}

impl EstimatorTag {
    /// The seven standard transport/reference estimators.
    pub const STANDARD: [EstimatorTag; 7] = [
        EstimatorTag::OrPh,
        EstimatorTag::Ipsw,
        EstimatorTag::Cw,
        EstimatorTag::AcwPh,
        EstimatorTag::AcwHare,
        EstimatorTag::RctPh,
        EstimatorTag::RctHare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::OrPh => "OR_PH",
            EstimatorTag::OrHare => "OR_HARE",
            EstimatorTag::Ipsw => "IPSW",
            EstimatorTag::Cw => "CW",
            EstimatorTag::AcwPh => "ACW_PH",
            EstimatorTag::AcwHare => "ACW_HARE",
            EstimatorTag::RctPh => "RCT_PH",
            EstimatorTag::RctHare => "RCT_HARE",
        }
    }

    pub fn needs_external(self) -> bool {
        !matches!(self, EstimatorTag::RctPh | EstimatorTag::RctHare)
    }

    pub fn needs_weights(self) -> bool {
        matches!(
            self,
            EstimatorTag::Ipsw | EstimatorTag::Cw | EstimatorTag::AcwPh | EstimatorTag::AcwHare
        )
    }

    pub fn needs_cox_outcome(self) -> bool {
        matches!(self, EstimatorTag::OrPh | EstimatorTag::AcwPh | EstimatorTag::RctPh)
    }

    pub fn needs_hare_outcome(self) -> bool {
        matches!(self, EstimatorTag::OrHare | EstimatorTag::AcwHare | EstimatorTag::RctHare)
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "OR_PH" => Ok(EstimatorTag::OrPh),
            "OR_HARE" => Ok(EstimatorTag::OrHare),
            "IPSW" => Ok(EstimatorTag::Ipsw),
            "CW" => Ok(EstimatorTag::Cw),
            "ACW_PH" => Ok(EstimatorTag::AcwPh),
            "ACW_HARE" => Ok(EstimatorTag::AcwHare),
            "RCT_PH" => Ok(EstimatorTag::RctPh),
            "RCT_HARE" => Ok(EstimatorTag::RctHare),
            other => Err(format!("unknown estimator tag `{other}`")),
        }
    }
}

/// Step-function estimate of a treatment-specific survival curve in the
/// target population, with optional pointwise bootstrap intervals.
#[derive(Debug, Clone, Serialize)]
pub struct SurvivalCurveEstimate {
    pub estimator: EstimatorTag,
    pub arm: Arm,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl SurvivalCurveEstimate {
    /// Right-continuous step lookup; 1 before the first recorded time.
    pub fn value_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 1.0,
            k => self.values[k - 1],
        }
    }

    /// Clamp into [0, 1] and enforce monotone non-increase by running
    /// minimum. Returns true when anything moved by more than `tol`.
    pub(crate) fn isotonize(&mut self, tol: f64) -> bool {
        let mut changed = false;
        let mut floor = 1.0f64;
        for v in self.values.iter_mut() {
            let raw = *v;
            let adjusted = raw.clamp(0.0, 1.0).min(floor);
            if (adjusted - raw).abs() > tol {
                changed = true;
            }
            *v = adjusted;
            floor = adjusted;
        }
        changed
    }
}

/// Difference of treatment-specific survival probabilities at the horizon.
#[derive(Debug, Clone, Serialize)]
pub struct TateEstimate {
    pub horizon: f64,
    pub survival_treated: f64,
    pub survival_control: f64,
    pub tate: f64,
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

/// Survival difference (experimental minus control) at the horizon,
/// step-interpolated on each curve.
pub fn estimate_tate(
    treated: &SurvivalCurveEstimate,
    control: &SurvivalCurveEstimate,
    horizon: f64,
) -> TateEstimate {
    let s1 = treated.value_at(horizon);
    let s0 = control.value_at(horizon);
    TateEstimate {
        horizon,
        survival_treated: s1,
        survival_control: s0,
        tate: s1 - s0,
        std_error: None,
        ci_lower: None,
        ci_upper: None,
    }
}
