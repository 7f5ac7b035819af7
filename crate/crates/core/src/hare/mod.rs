//! Linear-spline hazard regression: the conditional log-hazard is a linear
//! combination of piecewise-linear basis terms in time and covariates,
//! including time-covariate products, so the model class contains non-
//! proportional hazards. Coefficients are maximum-likelihood under the
//! right-censored full likelihood; terms are chosen by stepwise addition and
//! deletion under AIC.

mod basis;
mod fit;

pub use basis::{
    cumulative_hazard, cumulative_hazard_grid, log_hazard, BasisTerm, CovAtom, HareBasis,
    TimeAtom,
};
pub use fit::{
    conditional_survival_hare, fit_hare, fit_hare_fixed_basis, HareConfig, HareFit,
    SelectionAction, SelectionStep,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HareError {
    #[error("empty input")]
    Empty,
    #[error("input lengths disagree")]
    LengthMismatch,
    #[error("basis must contain the constant term")]
    MissingConstant,
    #[error("{events} events cannot support {terms} basis terms")]
    TooFewEvents { events: usize, terms: usize },
    #[error("stepwise selection requires at least {required} events, found {found}")]
    TooFewEventsForSelection { required: usize, found: usize },
    #[error("design is rank deficient at term {0}")]
    RankDeficient(usize),
    #[error("likelihood maximization did not converge (max |score| = {0:.3e})")]
    NotConverged(f64),
    #[error("covariate vector has length {got}, basis references column {needed}")]
    CovariateLength { needed: usize, got: usize },
}
