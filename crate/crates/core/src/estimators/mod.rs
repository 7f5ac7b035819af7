//! Transport estimators for treatment-specific survival in an external
//! target population: outcome regression (OR), inverse-probability-of-
//! sampling (IPSW) and calibration weighting (CW), the augmented doubly
//! robust combination (ACW) under proportional-hazards or spline outcome
//! models, trial-only references, the target average treatment effect, and
//! nonparametric bootstrap uncertainty.

mod bootstrap;
mod curves;
mod transport;

pub use bootstrap::{bootstrap, BootstrapConfig, BootstrapSummary, CurveBand, TateUncertainty};
pub use curves::{estimate_tate, EstimatorTag, SurvivalCurveEstimate, TateEstimate};
pub use transport::{run_transport, RunDiagnostics, TransportConfig, TransportResults};

use thiserror::Error;

use crate::data::{Arm, DataError};
use crate::hare::HareError;
use crate::survival::SurvivalError;
use crate::weighting::WeightError;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("outcome model: {0}")]
    Survival(#[from] SurvivalError),
    #[error("weighting: {0}")]
    Weight(#[from] WeightError),
    #[error("hazard regression: {0}")]
    Hare(#[from] HareError),
    #[error("no estimators requested")]
    NoEstimators,
    #[error("horizon {horizon} lies outside trial follow-up (max time {max_time})")]
    HorizonOutsideFollowup { horizon: f64, max_time: f64 },
    #[error("trial arm {0:?} has no records")]
    MissingArm(Arm),
    #[error(
        "denominator non-positive at time {time:.6} for {estimator} arm {arm}; \
         extreme weights or model failure"
    )]
    NonPositiveDenominator { time: f64, estimator: String, arm: Arm },
    #[error("outcome feature `{0}` is not a shared covariate")]
    UnknownFeature(String),
    #[error("bootstrap requires at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("{failed} of {total} bootstrap replicates failed (more than 10%)")]
    TooManyBootstrapFailures { failed: usize, total: usize },
}
