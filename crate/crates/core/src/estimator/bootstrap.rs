//! Nonparametric subject-level bootstrap of the whole pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_point, EstimatorConfig, EstimatorError, ModelSpec};
use crate::counterfactual::PsiVector;
use crate::data_model::Cohort;

/// Smallest accepted number of replicates.
pub const MIN_REPLICATES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failed: usize,
    pub seed: u64,
    pub se: Vec<f64>,
    /// 95% percentile interval bounds per coordinate.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub estimates: Vec<Vec<f64>>,
}

/// Type-7 sample quantile of sorted values.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples subjects with replacement and refits Steps 1 to 3 per replicate,
/// starting Newton at `warm_start`. Replicate `b` draws from stream `b + 1` of
/// a ChaCha8 generator seeded with `seed`.
pub fn bootstrap_variance(
    cohort: &Cohort,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
    seed: u64,
    warm_start: &PsiVector,
) -> Result<BootstrapSummary, EstimatorError> {
    let b = cfg.bootstrap_replicates;
    if b < MIN_REPLICATES {
        return Err(EstimatorError::TooFewReplicates(b));
    }
    let n = cohort.len();
    let outcomes: Vec<Result<Vec<f64>, String>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = cohort.resample(&idx);
            fit_point(&resampled, spec, cfg, Some(warm_start))
                .map(|(_, s)| s.psi.to_vec())
                .map_err(|e| e.to_string())
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed as f64 > cfg.bootstrap_failure_limit * b as f64 {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(EstimatorError::BootstrapFailures {
            failed,
            total: b,
            first,
        });
    }
    let estimates: Vec<Vec<f64>> = outcomes.into_iter().filter_map(Result::ok).collect();
    let p = warm_start.dim();
    let m = estimates.len() as f64;
    let mut se = Vec::with_capacity(p);
    let mut ci_lower = Vec::with_capacity(p);
    let mut ci_upper = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
        let mean = col.iter().sum::<f64>() / m;
        se.push((col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt());
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ci_lower.push(quantile(&col, 0.025));
        ci_upper.push(quantile(&col, 0.975));
    }
    Ok(BootstrapSummary {
        replicates: b,
        failed,
        seed,
        se,
        ci_lower,
        ci_upper,
        estimates,
    })
}
