//! The IPCW-weighted, doubly robust estimating equation for `ψ`, its
//! Newton-Raphson solver and a subject-level bootstrap.
//!
//! The pipeline runs in three steps: refill gap-time hazard, censoring Cox
//! model with Breslow baseline, then the estimating equation
//! `P_n (Δ/Ŝ_C) Σ_k ∫ c(H̄_u) [U(ψ) - Ê{U(ψ) | H̄_u, T_k >= u}] dM̂_k(u) = 0`.

mod bootstrap;
mod equation;
mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bootstrap::{bootstrap_variance, BootstrapSummary};
pub use equation::{
    c_opt, conditional_mean_u, EstimatingEquation, Evaluation, IndexFunction,
    OutcomeFeature, OutcomeRegressionModel, ACCRUED, GAP_CLOCK,
};
pub use solver::{solve_psi, IterationRecord, Solution};

use crate::counterfactual::{CounterfactualError, EffectModifierMap, PsiVector};
use crate::data_model::{Cohort, DataError, Schema, SubjectTrajectory};
use crate::hazard_models::{
    censoring_survival, fit_censoring_cox, fit_refill_hazard, gap_observations,
    CensoringCoxModel, CoxFitConfig, FeatureMap, HazardError, RefillFitConfig, RefillHazardModel,
    REFILL_INDEX,
};
use crate::martingale::MartingaleError;

/// Version tag of [`EstimationResult`] JSON.
pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Error)]
pub enum EstimatorError {
    #[error("no uncensored subjects")]
    NoUncensored,
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("risk point k = {k}, u = {u} is outside the subject's gap windows")]
    InvalidRiskPoint { k: usize, u: f64 },
    #[error("index has {rows} x {columns} coefficients, expected {expected:?}")]
    IndexShape {
        rows: usize,
        columns: usize,
        expected: (usize, usize),
    },
    #[error("outcome regression was fitted at a different psi")]
    StaleRegression,
    #[error(
        "estimating-equation Jacobian is singular (reciprocal condition {rcond:e}) at psi = {psi:?}; \
         psi is not identifiable without variation in treatment and effect modifiers"
    )]
    Singular { psi: Vec<f64>, rcond: f64 },
    #[error("Newton-Raphson did not converge: {reason}")]
    NotConverged {
        reason: String,
        solution: Box<Solution>,
    },
    #[error("bootstrap needs at least 50 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("{failed} of {total} bootstrap replicates failed; first failure: {first}")]
    BootstrapFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Martingale(#[from] MartingaleError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Feature selections for every nuisance model and the effect modifiers `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub effect_modifiers: Vec<String>,
    /// Centers subtracted from each effect modifier; zeros when empty.
    #[serde(default)]
    pub effect_centers: Vec<f64>,
    /// Covariate, baseline or `"k"` names for the refill hazard.
    #[serde(default)]
    pub refill_features: Vec<String>,
    /// Covariate or baseline names for the censoring Cox model.
    #[serde(default)]
    pub censoring_features: Vec<String>,
    /// Outcome-regression features besides the intercept: covariate or
    /// baseline names, `"k"`, `"u"` (gap clock) and `"accrued"`.
    #[serde(default)]
    pub outcome_features: Vec<String>,
}

impl ModelSpec {
    pub fn effect_modifier_map(&self, schema: &Schema) -> Result<EffectModifierMap, EstimatorError> {
        let centers = (!self.effect_centers.is_empty()).then_some(self.effect_centers.as_slice());
        Ok(EffectModifierMap::from_schema(schema, &self.effect_modifiers, centers)?)
    }

    /// Outcome features with the gap-clock terms `k`, `u` and `accrued` appended.
    pub fn with_clock_terms(mut self) -> Self {
        for name in [REFILL_INDEX, GAP_CLOCK, ACCRUED] {
            if !self.outcome_features.iter().any(|f| f == name) {
                self.outcome_features.push(name.to_string());
            }
        }
        self
    }
}

/// How the index `c(H̄_u)` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexChoice {
    /// `(1, g(L_u))`, times [`EstimatorConfig::simple_index_scale`].
    Simple,
    /// The locally efficient index with a pooled residual variance.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub index_choice: IndexChoice,
    /// Positive multiplier of the simple index; the root does not depend on it.
    pub simple_index_scale: f64,
    /// Convergence when `‖P_n EE‖` falls to this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Reciprocal condition number below which the Jacobian counts as singular.
    pub singular_rcond: f64,
    pub variance_floor: f64,
    pub bootstrap_replicates: usize,
    /// Largest tolerated fraction of failed bootstrap replicates.
    pub bootstrap_failure_limit: f64,
    pub positivity_floor: f64,
    pub refill: RefillFitConfig,
    pub censoring: CoxFitConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            index_choice: IndexChoice::Simple,
            simple_index_scale: 1.0,
            tolerance: 1e-8,
            max_iterations: 100,
            max_halvings: 20,
            singular_rcond: 1e-10,
            variance_floor: 1e-8,
            bootstrap_replicates: 200,
            bootstrap_failure_limit: 0.2,
            positivity_floor: 0.05,
            refill: RefillFitConfig::default(),
            censoring: CoxFitConfig::default(),
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (0 picks the default).
///
/// Every parallel map in the pipeline collects in subject or replicate order
/// and reduces sequentially, so results do not depend on `threads`.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, EstimatorError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EstimatorError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// `Δ_i / Ŝ_C(X_i | H̄)`; zero for censored subjects.
pub fn ipcw_weight(
    s: &SubjectTrajectory,
    cm: &CensoringCoxModel,
    floor: f64,
) -> Result<f64, EstimatorError> {
    if !s.event() {
        return Ok(0.0);
    }
    Ok(1.0 / censoring_survival(cm, s, s.followup_time(), floor)?)
}

/// Fitted nuisance models and the subject weights they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisances {
    pub refill: RefillHazardModel,
    pub censoring: CensoringCoxModel,
    pub weights: Vec<f64>,
}

/// Steps 1 and 2: refill hazard, censoring model and IPCW weights.
///
/// Censoring is only possible after the last refill, so it is informative
/// about the refill process. The refill likelihood is therefore built from
/// the uncensored subjects' complete paths, each weighted by `Δ/Ŝ_C`, with the
/// terminal period entering as right-censored at death.
pub fn fit_nuisances(
    cohort: &Cohort,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
) -> Result<Nuisances, EstimatorError> {
    if !cohort.subjects().iter().any(|s| s.event()) {
        return Err(EstimatorError::NoUncensored);
    }
    let schema = cohort.schema();
    let cfm = FeatureMap::from_names(schema, &spec.censoring_features)?;
    let censoring = fit_censoring_cox(cohort, cfm, &cfg.censoring)?;
    let weights: Vec<f64> = cohort
        .subjects()
        .iter()
        .map(|s| ipcw_weight(s, &censoring, cfg.positivity_floor))
        .collect::<Result<_, _>>()?;
    let rfm = FeatureMap::from_names(schema, &spec.refill_features)?;
    let obs = gap_observations(cohort, &rfm, Some(&weights));
    let refill = fit_refill_hazard(&obs, rfm, &cfg.refill).map_err(EstimatorError::Hazard)?;
    Ok(Nuisances {
        refill,
        censoring,
        weights,
    })
}

/// Summary of the weight distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub uncensored: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Kish effective sample size `(Σω)² / Σω²` over uncensored subjects.
    pub effective_sample_size: f64,
}

impl WeightSummary {
    pub fn new(weights: &[f64]) -> Self {
        let pos: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
        let sum: f64 = pos.iter().sum();
        let sq: f64 = pos.iter().map(|w| w * w).sum();
        Self {
            uncensored: pos.len(),
            min: pos.iter().copied().fold(f64::INFINITY, f64::min),
            max: pos.iter().copied().fold(0.0, f64::max),
            mean: weights.iter().sum::<f64>() / weights.len() as f64,
            effective_sample_size: if sq > 0.0 { sum * sum / sq } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub refill_features: Vec<String>,
    pub refill_gamma: Vec<f64>,
    pub refill_cuts: Vec<f64>,
    pub refill_rates: Vec<f64>,
    pub censoring_features: Vec<String>,
    pub censoring_gamma: Vec<f64>,
    pub censoring_events: usize,
    pub outcome_features: Vec<OutcomeFeature>,
    pub outcome_coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub weights: WeightSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub schema_version: u32,
    pub parameter_names: Vec<String>,
    pub psi_hat: Vec<f64>,
    pub ee_at_solution: Vec<f64>,
    pub ee_norm_at_solution: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    pub bootstrap: Option<BootstrapSummary>,
    pub nuisance: NuisanceSummary,
    pub warnings: Vec<String>,
    pub spec: ModelSpec,
    pub config: EstimatorConfig,
    pub seed: u64,
}

impl EstimationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn psi(&self) -> PsiVector {
        PsiVector::from_slice(&self.psi_hat)
    }
}

/// Names `psi1`, `psi2[<modifier>]`.
pub fn parameter_names(g: &EffectModifierMap) -> Vec<String> {
    std::iter::once("psi1".to_string())
        .chain(g.names().iter().map(|n| format!("psi2[{n}]")))
        .collect()
}

/// Point estimate only: nuisances, equation and solver.
///
/// With [`IndexChoice::Optimal`] the equation is first solved with the simple
/// index; `c^opt` is then estimated at that root, frozen, and the equation
/// solved again from there.
pub fn fit_point(
    cohort: &Cohort,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
    initial: Option<&PsiVector>,
) -> Result<(Nuisances, Solution), EstimatorError> {
    let nuisances = fit_nuisances(cohort, spec, cfg)?;
    let start = PsiVector::zeros(spec.effect_modifiers.len());
    let start = initial.unwrap_or(&start);
    let solution = match cfg.index_choice {
        IndexChoice::Simple => {
            let eq = EstimatingEquation::new(cohort, spec, &nuisances, cfg)?;
            solve_psi(&eq, cfg, start)?
        }
        IndexChoice::Optimal => {
            let simple = EstimatorConfig {
                index_choice: IndexChoice::Simple,
                ..cfg.clone()
            };
            let mut eq = EstimatingEquation::new(cohort, spec, &nuisances, &simple)?;
            let preliminary = solve_psi(&eq, &simple, start)?;
            eq.set_index(IndexChoice::Optimal);
            eq.freeze_index(&preliminary.psi)?;
            solve_psi(&eq, cfg, &preliminary.psi)?
        }
    };
    Ok((nuisances, solution))
}

/// The full pipeline with bootstrap inference when `replicates > 0`.
///
/// Non-convergence of the point estimate is returned as
/// [`EstimatorError::NotConverged`] carrying the last iterate.
pub fn estimate(
    cohort: &Cohort,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<EstimationResult, EstimatorError> {
    let (nuisances, solution) = fit_point(cohort, spec, cfg, None)?;
    let mut warnings = Vec::new();
    if let Some(w) = nuisances.censoring.warning() {
        warnings.push(w.to_string());
    }
    if solution.evaluation.outcome.variance_floored {
        warnings.push(format!(
            "residual variance floored at {}",
            cfg.variance_floor
        ));
    }
    let bootstrap = if cfg.bootstrap_replicates > 0 {
        let b = bootstrap_variance(cohort, spec, cfg, seed, &solution.psi)?;
        if b.failed > 0 {
            warnings.push(format!("{} bootstrap replicates failed", b.failed));
        }
        Some(b)
    } else {
        None
    };
    let g = spec.effect_modifier_map(cohort.schema())?;
    Ok(build_result(&g, spec, cfg, seed, &nuisances, &solution, bootstrap, warnings))
}

/// The result record for a solve that stopped without converging, as carried
/// by [`EstimatorError::NotConverged`]. Nuisances are refitted; no bootstrap.
pub fn unconverged_result(
    cohort: &Cohort,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
    seed: u64,
    solution: &Solution,
    reason: &str,
) -> Result<EstimationResult, EstimatorError> {
    let nuisances = fit_nuisances(cohort, spec, cfg)?;
    let g = spec.effect_modifier_map(cohort.schema())?;
    let warnings = vec![format!("Newton-Raphson did not converge: {reason}")];
    Ok(build_result(&g, spec, cfg, seed, &nuisances, solution, None, warnings))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_result(
    g: &EffectModifierMap,
    spec: &ModelSpec,
    cfg: &EstimatorConfig,
    seed: u64,
    nuisances: &Nuisances,
    solution: &Solution,
    bootstrap: Option<BootstrapSummary>,
    warnings: Vec<String>,
) -> EstimationResult {
    let orm = &solution.evaluation.outcome;
    EstimationResult {
        schema_version: RESULT_SCHEMA_VERSION,
        parameter_names: parameter_names(g),
        psi_hat: solution.psi.to_vec(),
        ee_at_solution: solution.evaluation.ee.clone(),
        ee_norm_at_solution: solution.ee_norm,
        iterations: solution.iterations,
        converged: solution.converged,
        trace: solution.trace.clone(),
        bootstrap,
        nuisance: NuisanceSummary {
            refill_features: nuisances.refill.feature_map().names().to_vec(),
            refill_gamma: nuisances.refill.gamma().to_vec(),
            refill_cuts: nuisances.refill.baseline().cuts().to_vec(),
            refill_rates: nuisances.refill.baseline().rates().to_vec(),
            censoring_features: nuisances.censoring.feature_map().names().to_vec(),
            censoring_gamma: nuisances.censoring.gamma().to_vec(),
            censoring_events: nuisances.censoring.events(),
            outcome_features: orm.features.clone(),
            outcome_coefficients: orm.coefficients.clone(),
            residual_variance: orm.residual_variance,
            weights: WeightSummary::new(&nuisances.weights),
        },
        warnings,
        spec: spec.clone(),
        config: cfg.clone(),
        seed,
    }
}
