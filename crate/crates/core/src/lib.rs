//! Transport of treatment effects on survival outcomes from a randomized
//! trial to external target populations.
//!
//! The crate provides:
//! - Kaplan-Meier and Cox proportional-hazards fitting with Breslow baseline,
//!   plus Schoenfeld-residual proportionality diagnostics ([`survival`]);
//! - entropy-balancing calibration weights, sampling/propensity/censoring
//!   models ([`weighting`]);
//! - a linear-spline hazard regression with stepwise AIC selection that does
//!   not require proportional hazards ([`hare`]);
//! - outcome-regression, weighted, and augmented (doubly robust) survival
//!   transport estimators with bootstrap uncertainty ([`estimators`]);
//! - emulation of individual-level external samples from published summary
//!   statistics through a Gaussian copula ([`emulation`]);
//! - a batch pipeline that orchestrates the above and emits tables, curve
//!   files, diagnostics, and a run manifest ([`pipeline`]).

pub mod data;
pub mod emulation;
pub mod estimators;
pub mod hare;
mod linalg;
pub mod pipeline;
pub mod survival;
pub mod weighting;

pub use data::{Arm, CovariateKind, CovariateSchema, SourceInfo, StudyData, SubjectRecord};
pub use estimators::{EstimatorTag, SurvivalCurveEstimate, TateEstimate, TransportConfig};
pub use hare::{HareBasis, HareConfig, HareFit};
pub use survival::{CoxFit, KaplanMeierCurve, PhTestResult, TimeTransform};
pub use weighting::{CalibrationSpec, GFunction, WeightSet};
