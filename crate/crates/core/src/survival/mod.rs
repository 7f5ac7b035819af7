//! Foundational survival estimation: Kaplan-Meier product-limit curves,
//! Cox proportional-hazards fitting with a Breslow baseline, and the
//! Grambsch-Therneau Schoenfeld-residual test of proportionality.

mod cox;
mod km;
mod schoenfeld;

pub use cox::{
    conditional_survival, fit_cox, BaselineCumHaz, CoxFit, CoxOptions, CoxResponse,
};
pub use km::{fit_kaplan_meier, KaplanMeierCurve};
pub use schoenfeld::{schoenfeld_ph_test, PhTestResult, TimeTransform};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("empty input")]
    Empty,
    #[error("input lengths disagree (times {times}, events {events}, weights {weights})")]
    LengthMismatch { times: usize, events: usize, weights: usize },
    #[error("time {0} is negative or non-finite")]
    InvalidTime(f64),
    #[error("weight {0} must be positive and finite")]
    InvalidWeight(f64),
    #[error("no events observed; the partial likelihood carries no information")]
    NoEvents,
    #[error("{p} covariates but only {events} events")]
    TooFewEvents { p: usize, events: usize },
    #[error("information matrix is singular; collinear or constant columns: {columns:?}")]
    SingularInformation { columns: Vec<usize> },
    #[error(
        "Newton iteration did not converge after {iterations} iterations \
         (max |score| = {score_norm:.3e}, last iterate {last_coefficients:?})"
    )]
    NotConverged { iterations: usize, score_norm: f64, last_coefficients: Vec<f64> },
    #[error("proportionality test requires at least 2 events, found {0}")]
    TooFewEventsForTest(usize),
    #[error("proportionality test requires a converged fit")]
    FitNotConverged,
    #[error("covariate vector has length {got}, fit expects {expected}")]
    CovariateLength { expected: usize, got: usize },
}
