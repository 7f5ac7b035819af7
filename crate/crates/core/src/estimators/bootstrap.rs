use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Arm, ExternalData, StudyData, TrialData};
use crate::linalg;

use super::curves::EstimatorTag;
use super::transport::{run_transport, TransportConfig, TransportResults};
use super::EstimateError;

/// Bootstrap controls. Replicates draw independent pseudo-random streams
/// derived from `(seed, replicate index)`, so results are deterministic for a
/// fixed seed regardless of thread scheduling.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
}

/// Pointwise percentile band for one curve, on the point-estimate grid.
#[derive(Debug, Clone, Serialize)]
pub struct CurveBand {
    pub estimator: EstimatorTag,
    pub arm: Arm,
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Bootstrap spread of the treatment-effect estimate.
#[derive(Debug, Clone, Serialize)]
pub struct TateUncertainty {
    pub estimator: EstimatorTag,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    pub n_replicates: usize,
    pub n_failed: usize,
    pub curve_bands: Vec<CurveBand>,
    pub tates: Vec<TateUncertainty>,
}

fn resample_trial(trial: &TrialData, rng: &mut ChaCha12Rng) -> TrialData {
    // stratified by arm: each arm resampled with replacement at its own size
    let mut idx = Vec::with_capacity(trial.len());
    for arm in Arm::BOTH {
        let members: Vec<usize> =
            (0..trial.len()).filter(|&i| trial.arms[i] == arm).collect();
        for _ in 0..members.len() {
            idx.push(members[rng.gen_range(0..members.len())]);
        }
    }
    let mut covariates = Array2::<f64>::zeros((idx.len(), trial.n_features()));
    for (r, &i) in idx.iter().enumerate() {
        covariates.row_mut(r).assign(&trial.covariates.row(i));
    }
    TrialData {
        times: idx.iter().map(|&i| trial.times[i]).collect(),
        events: idx.iter().map(|&i| trial.events[i]).collect(),
        arms: idx.iter().map(|&i| trial.arms[i]).collect(),
        covariates,
    }
}

fn resample_external(external: &ExternalData, rng: &mut ChaCha12Rng) -> ExternalData {
    let m = external.len();
    let mut covariates = Array2::<f64>::zeros((m, external.covariates.ncols()));
    let mut design_weights = Vec::with_capacity(m);
    for r in 0..m {
        let i = rng.gen_range(0..m);
        covariates.row_mut(r).assign(&external.covariates.row(i));
        design_weights.push(external.design_weights[i]);
    }
    ExternalData { covariates, design_weights }
}

/// Nonparametric bootstrap of the full pipeline: the trial (stratified by
/// arm) and the external sample are resampled independently, every nuisance
/// model is refitted per replicate, and percentile intervals are taken over
/// the surviving replicates. Replicate-level failures are dropped and
/// counted; more than 10% failing is an error.
pub fn bootstrap(
    study: &StudyData,
    cfg: &TransportConfig,
    point: &TransportResults,
    boot: BootstrapConfig,
) -> Result<BootstrapSummary, EstimateError> {
    if boot.replicates < 2 {
        return Err(EstimateError::TooFewReplicates(boot.replicates));
    }

    let replicate_results: Vec<Option<TransportResults>> = (0..boot.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha12Rng::seed_from_u64(boot.seed);
            rng.set_stream(rep as u64 + 1);
            let resampled = StudyData {
                feature_names: study.feature_names.clone(),
                trial: resample_trial(&study.trial, &mut rng),
                external: if study.external.is_empty() {
                    study.external.clone()
                } else {
                    resample_external(&study.external, &mut rng)
                },
            };
            run_transport(&resampled, cfg).ok()
        })
        .collect();

    let n_failed = replicate_results.iter().filter(|r| r.is_none()).count();
    if n_failed * 10 > boot.replicates {
        return Err(EstimateError::TooManyBootstrapFailures {
            failed: n_failed,
            total: boot.replicates,
        });
    }
    let kept: Vec<&TransportResults> =
        replicate_results.iter().flatten().collect();

    let mut curve_bands = Vec::new();
    for curve in &point.curves {
        let kk = curve.times.len();
        let mut lower = Vec::with_capacity(kk);
        let mut upper = Vec::with_capacity(kk);
        for (k, &t) in curve.times.iter().enumerate() {
            let draws: Vec<f64> = kept
                .iter()
                .filter_map(|r| r.curve(curve.estimator, curve.arm))
                .map(|c| c.value_at(t))
                .collect();
            if draws.is_empty() {
                lower.push(curve.values[k]);
                upper.push(curve.values[k]);
            } else {
                lower.push(linalg::quantile(&draws, 0.025));
                upper.push(linalg::quantile(&draws, 0.975));
            }
        }
        curve_bands.push(CurveBand {
            estimator: curve.estimator,
            arm: curve.arm,
            times: curve.times.clone(),
            lower,
            upper,
        });
    }

    let mut tates = Vec::new();
    for (tag, _) in &point.tates {
        let draws: Vec<f64> = kept
            .iter()
            .filter_map(|r| r.tate(*tag))
            .map(|t| t.tate)
            .collect();
        if draws.len() < 2 {
            continue;
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;
        tates.push(TateUncertainty {
            estimator: *tag,
            std_error: var.sqrt(),
            ci_lower: linalg::quantile(&draws, 0.025),
            ci_upper: linalg::quantile(&draws, 0.975),
        });
    }

    Ok(BootstrapSummary {
        n_replicates: boot.replicates,
        n_failed,
        curve_bands,
        tates,
    })
}
