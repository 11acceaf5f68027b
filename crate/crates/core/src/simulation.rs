//! Synthetic cohorts with a known causal parameter.
//!
//! Each subject carries an observed disease stage `l2 ∈ {0, .., m - 1}` that
//! advances at a constant rate on the counterfactual clock, with death when the
//! last stage is completed, and a continuous marker `l1` that is refreshed at
//! exponential calendar intervals. `U` is therefore Erlang given the initial
//! stage and `E{U | H̄_t} = U(t) + (m - l2(t)) / rate` is linear in the history.
//! A baseline binary `x0_1` shifts the refill and censoring hazards. The
//! counterfactual clock advances at rate `exp{ψ1 + ψ2'(g(L) - center)}` while
//! treated and 1 otherwise, so death occurs when the accrued clock reaches
//! the latent `U`. Refills follow a proportional gap-time hazard; censoring is
//! drawn on `(V_K, ∞)` from a Cox law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::{invert_mimicking, CounterfactualError, EffectModifierMap, PsiVector};
use crate::data_model::{
    normalize_dispensations_with, Cohort, CovariateProcess, DataError, Schema, SubjectTrajectory,
    TreatmentPath, DEFAULT_EPSILON,
};
use crate::estimator::ModelSpec;
use crate::hazard_models::{FeatureMap, PiecewiseConstantBaseline, RefillHazardModel};

/// Covariate names, in column order.
pub const COVARIATES: [&str; 2] = ["l1", "l2"];
/// Baseline covariate names.
pub const BASELINE: [&str; 1] = ["x0_1"];
/// The confounder dropped by [`misspecify`]: it drives refills, censoring and death.
pub const CONFOUNDER: &str = "l2";

#[derive(Debug, Clone, Error)]
pub enum SimulationError {
    #[error("invalid scenario field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("subject {index}: no refill after baseline in {retries} attempts")]
    NoRefills { index: usize, retries: usize },
    #[error("covariate {name:?} is not active in the true {which} model")]
    InactiveCovariate { name: String, which: &'static str },
    #[error("scenario needs at least two covariates for a misspecification arm")]
    TooFewCovariates,
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn config_error(field: &str, message: impl Into<String>) -> SimulationError {
    SimulationError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Progressive stage chain `l2` on the counterfactual clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseSpec {
    /// Number of stages `m`; completing stage `m - 1` is death.
    pub stages: usize,
    /// Per-day rate of leaving each stage.
    pub progression_rate: f64,
    /// The initial stage is uniform on `0..=max_initial_stage`.
    #[serde(default)]
    pub max_initial_stage: usize,
}

/// Marker `l1` driven by a Gaussian AR(1) process `z` refreshed at
/// exponential calendar intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub update_rate: f64,
    pub autocorrelation: f64,
    /// Stationary standard deviation of `z`.
    pub sd: f64,
    /// When set, `l1 = b tanh(z / b)` saturates at `±b`; otherwise `l1 = z`.
    #[serde(default)]
    pub bound: Option<f64>,
}

impl MarkerSpec {
    fn observe(&self, z: f64) -> f64 {
        match self.bound {
            Some(b) => b * (z / b).tanh(),
            None => z,
        }
    }
}

/// Coefficients on `(x0_1, l1, l2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default)]
    pub x0_1: f64,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
}

impl Coefficients {
    fn dot(&self, x0: f64, l1: f64, l2: f64) -> f64 {
        self.x0_1 * x0 + self.l1 * l1 + self.l2 * l2
    }

    fn get(&self, name: &str) -> f64 {
        match name {
            "x0_1" => self.x0_1,
            "l1" => self.l1,
            "l2" => self.l2,
            _ => 0.0,
        }
    }

    /// Names with non-zero coefficients, in `(x0_1, l1, l2)` order.
    fn active(&self) -> Vec<String> {
        ["x0_1", "l1", "l2"]
            .into_iter()
            .filter(|n| self.get(n) != 0.0)
            .map(String::from)
            .collect()
    }
}

/// Gap-time law of refills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefillLaw {
    /// `λ(u) = baseline_rate · exp{γ'(x0_1, l1, l2)}` on the gap clock.
    Hazard {
        baseline_rate: f64,
        #[serde(default)]
        gamma: Coefficients,
    },
    /// Refill exactly at coverage end, so treatment never stops.
    Immediate,
}

/// Cox censoring law on `(V_K, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensoringSpec {
    pub baseline_rate: f64,
    #[serde(default)]
    pub gamma: Coefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    pub psi1: f64,
    #[serde(default)]
    pub psi2: Vec<f64>,
    /// Effect modifiers `g(L)`, by covariate name.
    #[serde(default)]
    pub effect_modifiers: Vec<String>,
    /// Centers subtracted from each effect modifier; zeros when empty.
    #[serde(default)]
    pub effect_centers: Vec<f64>,
    pub coverage_window: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub baseline_probability: f64,
    pub disease: DiseaseSpec,
    pub marker: MarkerSpec,
    pub refill: RefillLaw,
    #[serde(default)]
    pub censoring: Option<CensoringSpec>,
    /// Attempts per subject to obtain at least one refill after baseline.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_retries() -> usize {
    100
}

impl Default for ScenarioConfig {
    /// Two covariates, effect modification by `l1`, `ψ* = (-0.5, 0.3)`.
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 0,
            psi1: -0.5,
            psi2: vec![0.3],
            effect_modifiers: vec!["l1".into()],
            effect_centers: vec![],
            coverage_window: 30.0,
            epsilon: DEFAULT_EPSILON,
            baseline_probability: 0.5,
            disease: DiseaseSpec {
                stages: 8,
                progression_rate: 1.0 / 60.0,
                max_initial_stage: 0,
            },
            marker: MarkerSpec {
                update_rate: 1.0 / 30.0,
                autocorrelation: 0.8,
                sd: 1.5,
                bound: Some(1.2),
            },
            refill: RefillLaw::Hazard {
                baseline_rate: 1.0 / 30.0,
                gamma: Coefficients {
                    x0_1: 0.8,
                    l1: 0.2,
                    l2: 0.07,
                },
            },
            censoring: Some(CensoringSpec {
                baseline_rate: 1.0 / 600.0,
                gamma: Coefficients {
                    x0_1: 0.3,
                    l1: 0.0,
                    l2: 0.09,
                },
            }),
            max_retries: 100,
        }
    }
}

impl ScenarioConfig {
    /// The default scenario without effect modification, `ψ* = -0.5`.
    pub fn scalar() -> Self {
        Self {
            psi2: vec![],
            effect_modifiers: vec![],
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimulationError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn psi(&self) -> PsiVector {
        PsiVector::new(self.psi1, self.psi2.clone())
    }

    pub fn schema() -> Schema {
        Schema::new(
            COVARIATES.iter().map(|s| s.to_string()).collect(),
            BASELINE.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn effect_modifier_map(&self) -> Result<EffectModifierMap, CounterfactualError> {
        let centers = (!self.effect_centers.is_empty()).then_some(self.effect_centers.as_slice());
        EffectModifierMap::from_schema(&Self::schema(), &self.effect_modifiers, centers)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(field, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_error(field, format!("must be non-negative, got {v}")))
            }
        };
        let probability = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(config_error(field, format!("must lie in [0, 1], got {v}")))
            }
        };
        if self.n == 0 {
            return Err(config_error("n", "must be at least 1"));
        }
        if !self.psi1.is_finite() || self.psi2.iter().any(|x| !x.is_finite()) {
            return Err(config_error("psi", "must be finite"));
        }
        if self.psi2.len() != self.effect_modifiers.len() {
            return Err(config_error(
                "psi2",
                format!(
                    "has {} entries for {} effect modifiers",
                    self.psi2.len(),
                    self.effect_modifiers.len()
                ),
            ));
        }
        if !self.effect_centers.is_empty() && self.effect_centers.len() != self.effect_modifiers.len()
        {
            return Err(config_error("effect_centers", "needs one center per effect modifier"));
        }
        self.effect_modifier_map()
            .map_err(|e| config_error("effect_modifiers", e.to_string()))?;
        positive("coverage_window", self.coverage_window)?;
        if !(self.epsilon > 0.0 && self.epsilon < self.coverage_window) {
            return Err(config_error("epsilon", "must satisfy 0 < epsilon < coverage_window"));
        }
        probability("baseline_probability", self.baseline_probability)?;
        if self.disease.stages == 0 {
            return Err(config_error("disease.stages", "must be at least 1"));
        }
        positive("disease.progression_rate", self.disease.progression_rate)?;
        if self.disease.max_initial_stage >= self.disease.stages {
            return Err(config_error(
                "disease.max_initial_stage",
                "must be below disease.stages",
            ));
        }
        positive("marker.update_rate", self.marker.update_rate)?;
        if !(self.marker.autocorrelation.abs() <= 1.0) {
            return Err(config_error("marker.autocorrelation", "must lie in [-1, 1]"));
        }
        non_negative("marker.sd", self.marker.sd)?;
        if let Some(b) = self.marker.bound {
            positive("marker.bound", b)?;
        }
        if let RefillLaw::Hazard { baseline_rate, .. } = self.refill {
            positive("refill.baseline_rate", baseline_rate)?;
        }
        if let Some(c) = &self.censoring {
            positive("censoring.baseline_rate", c.baseline_rate)?;
        }
        if self.max_retries == 0 {
            return Err(config_error("max_retries", "must be at least 1"));
        }
        Ok(())
    }

    /// The true refill model, absent for [`RefillLaw::Immediate`].
    pub fn true_refill_model(&self) -> Option<RefillHazardModel> {
        match &self.refill {
            RefillLaw::Hazard {
                baseline_rate,
                gamma,
            } => {
                let names: Vec<String> = ["x0_1", "l1", "l2"].into_iter().map(String::from).collect();
                let fm = FeatureMap::from_names(&Self::schema(), &names).expect("fixed names");
                let baseline = PiecewiseConstantBaseline::constant(*baseline_rate).expect("validated");
                Some(
                    RefillHazardModel::new(fm, baseline, vec![gamma.x0_1, gamma.l1, gamma.l2])
                        .expect("fixed features"),
                )
            }
            RefillLaw::Immediate => None,
        }
    }

    /// Nuisance features matching the truth. The outcome regression uses
    /// every covariate, which contains the true conditional mean. With a
    /// single disease stage `l2` is constant and is left out everywhere.
    pub fn correct_spec(&self) -> ModelSpec {
        let refill_features = match &self.refill {
            RefillLaw::Hazard { gamma, .. } => gamma.active(),
            RefillLaw::Immediate => vec![],
        };
        let censoring_features = self
            .censoring
            .as_ref()
            .map(|c| c.gamma.active())
            .unwrap_or_default();
        let mut spec = ModelSpec {
            effect_modifiers: self.effect_modifiers.clone(),
            effect_centers: self.effect_centers.clone(),
            refill_features,
            censoring_features,
            outcome_features: ["x0_1", "l1", "l2"].into_iter().map(String::from).collect(),
        };
        if self.disease.stages == 1 {
            for v in [&mut spec.refill_features, &mut spec.censoring_features, &mut spec.outcome_features] {
                v.retain(|n| n != CONFOUNDER);
            }
        }
        spec.with_clock_terms()
    }
}

/// The nuisance model to misspecify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    OutcomeRegression,
    RefillHazard,
    Censoring,
}

/// [`ScenarioConfig::correct_spec`] with [`CONFOUNDER`] removed from `which`.
pub fn misspecify(cfg: &ScenarioConfig, which: Nuisance) -> Result<ModelSpec, SimulationError> {
    if COVARIATES.len() < 2 {
        return Err(SimulationError::TooFewCovariates);
    }
    let inactive = |which| SimulationError::InactiveCovariate {
        name: CONFOUNDER.to_string(),
        which,
    };
    let mut spec = cfg.correct_spec();
    let drop = |v: &mut Vec<String>| v.retain(|n| n != CONFOUNDER);
    match which {
        Nuisance::OutcomeRegression => {
            if cfg.disease.stages == 1 {
                return Err(inactive("outcome"));
            }
            drop(&mut spec.outcome_features);
        }
        Nuisance::RefillHazard => {
            if !spec.refill_features.iter().any(|n| n == CONFOUNDER) {
                return Err(inactive("refill"));
            }
            drop(&mut spec.refill_features);
        }
        Nuisance::Censoring => {
            if !spec.censoring_features.iter().any(|n| n == CONFOUNDER) {
                return Err(inactive("censoring"));
            }
            drop(&mut spec.censoring_features);
        }
    }
    Ok(spec)
}

/// Latent quantities of one simulated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSubject {
    pub id: String,
    /// Baseline failure time on the counterfactual clock.
    pub u: f64,
    /// Failure time on the calendar clock.
    pub tau: f64,
    /// Censoring time, when it falls before `tau`.
    pub censoring_time: Option<f64>,
    /// Probability of censoring before `tau` given the subject's path.
    pub censoring_probability: f64,
    /// Redraws needed to obtain a refill after baseline.
    pub retries: usize,
}

/// Ground truth; never read by the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub psi: PsiVector,
    pub effect_modifiers: Vec<String>,
    pub scenario: ScenarioConfig,
    pub refill_model: Option<RefillHazardModel>,
    pub subjects: Vec<LatentSubject>,
}

impl SimulationTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCohort {
    pub cohort: Cohort,
    pub truth: SimulationTruth,
}

/// Draws a cohort. Subject `i` uses stream `i` of a ChaCha8 generator seeded
/// with `cfg.seed`, so output does not depend on the thread count.
pub fn simulate_cohort(cfg: &ScenarioConfig) -> Result<SimulatedCohort, SimulationError> {
    cfg.validate()?;
    let g = cfg.effect_modifier_map()?;
    let psi = cfg.psi();
    let results: Vec<(SubjectTrajectory, LatentSubject)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| simulate_subject(cfg, &psi, &g, i))
        .collect::<Result<_, _>>()?;
    let (subjects, latent): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SimulatedCohort {
        cohort: Cohort::new(ScenarioConfig::schema(), subjects)?,
        truth: SimulationTruth {
            psi,
            effect_modifiers: cfg.effect_modifiers.clone(),
            scenario: cfg.clone(),
            refill_model: cfg.true_refill_model(),
            subjects: latent,
        },
    })
}

fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    Exp1.sample(rng)
}

/// Initial stage, stage entries `(s, stage)` on the counterfactual clock and
/// the death time `U`.
fn draw_stages(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> (usize, Vec<(f64, usize)>, f64) {
    let d = &cfg.disease;
    let initial = rng.random_range(0..=d.max_initial_stage);
    let mut s = 0.0;
    let mut switches = Vec::with_capacity(d.stages - initial);
    for stage in initial + 1..d.stages {
        s += exp1(rng) / d.progression_rate;
        switches.push((s, stage));
    }
    (initial, switches, s + exp1(rng) / d.progression_rate)
}

struct Draft {
    refills: Vec<f64>,
    change_times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn walk(
    cfg: &ScenarioConfig,
    psi: &PsiVector,
    g: &EffectModifierMap,
    x0: f64,
    rng: &mut ChaCha8Rng,
) -> (Draft, f64) {
    let (l2_initial, switches, u_total) = draw_stages(cfg, rng);
    let m = &cfg.marker;
    let innovation = m.sd * (1.0 - m.autocorrelation * m.autocorrelation).sqrt();
    let w = cfg.coverage_window;
    let eps = cfg.epsilon;

    let mut z: f64 = m.sd * rng.sample::<f64, _>(StandardNormal);
    let mut l1 = m.observe(z);
    let mut l2 = l2_initial as f64;
    let mut draft = Draft {
        refills: vec![0.0],
        change_times: vec![0.0],
        values: vec![vec![l1, l2]],
    };
    let mut t = 0.0;
    let mut accrued = 0.0;
    let mut next_switch = 0;
    let mut next_marker = exp1(rng) / m.update_rate;
    let mut refill_budget = exp1(rng);

    loop {
        let v = *draft.refills.last().unwrap();
        let cover_end = v + w;
        let gap_start = cover_end - eps;
        let treated = t < cover_end;
        let clock_rate = if treated {
            g.exponent(psi, &[l1, l2]).exp()
        } else {
            1.0
        };
        let boundary = if t < gap_start {
            gap_start
        } else if t < cover_end {
            cover_end
        } else {
            f64::INFINITY
        };
        let (cf_target, death) = match switches.get(next_switch) {
            Some(&(s, _)) => (s, false),
            None => (u_total, true),
        };
        let t_cf = t + (cf_target - accrued) / clock_rate;
        let refill_rate = match &cfg.refill {
            RefillLaw::Hazard {
                baseline_rate,
                gamma,
            } if t >= gap_start => baseline_rate * gamma.dot(x0, l1, l2).exp(),
            _ => 0.0,
        };
        let t_refill = if refill_rate > 0.0 {
            t + refill_budget / refill_rate
        } else {
            f64::INFINITY
        };
        // Ties resolve in the order: death/stage, refill, boundary, marker.
        let t_next = t_cf.min(t_refill).min(boundary).min(next_marker);
        accrued += clock_rate * (t_next - t);
        refill_budget -= refill_rate * (t_next - t);
        t = t_next;
        if t_next == t_cf {
            accrued = cf_target;
            if death {
                return (draft, u_total);
            }
            l2 = switches[next_switch].1 as f64;
            next_switch += 1;
            record(&mut draft, t, l1, l2);
        } else if t_next == t_refill {
            draft.refills.push(t.max(cover_end));
            refill_budget = exp1(rng);
        } else if t_next == boundary {
            if boundary == cover_end && matches!(cfg.refill, RefillLaw::Immediate) {
                draft.refills.push(cover_end);
            }
        } else {
            z = m.autocorrelation * z + innovation * rng.sample::<f64, _>(StandardNormal);
            l1 = m.observe(z);
            next_marker = t + exp1(rng) / m.update_rate;
            record(&mut draft, t, l1, l2);
        }
    }
}

fn record(d: &mut Draft, t: f64, l1: f64, l2: f64) {
    if *d.change_times.last().unwrap() == t {
        *d.values.last_mut().unwrap() = vec![l1, l2];
    } else {
        d.change_times.push(t);
        d.values.push(vec![l1, l2]);
    }
}

fn simulate_subject(
    cfg: &ScenarioConfig,
    psi: &PsiVector,
    g: &EffectModifierMap,
    index: usize,
) -> Result<(SubjectTrajectory, LatentSubject), SimulationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = format!("s{:05}", index + 1);
    for retries in 0..cfg.max_retries {
        let x0 = f64::from(u8::from(rng.random::<f64>() < cfg.baseline_probability));
        let (draft, u) = walk(cfg, psi, g, x0, &mut rng);
        if draft.refills.len() < 2 {
            continue;
        }
        let dispensations =
            normalize_dispensations_with(&draft.refills, cfg.coverage_window, cfg.epsilon)?;
        let covariates = CovariateProcess::new(draft.change_times, draft.values)?;
        let path = TreatmentPath::new(covariates, dispensations);
        let tau = invert_mimicking(u, &path, psi, g)?;
        let (censoring_time, censoring_probability) = draw_censoring(cfg, &path, x0, tau, &mut rng);
        let followup = censoring_time.unwrap_or(tau);
        let TreatmentPath {
            covariates,
            dispensations,
        } = path;
        let covariates = truncate(&covariates, followup)?;
        let s = SubjectTrajectory::new(
            id.clone(),
            followup,
            censoring_time.is_none(),
            vec![x0],
            covariates,
            dispensations,
        )?;
        return Ok((
            s,
            LatentSubject {
                id,
                u,
                tau,
                censoring_time,
                censoring_probability,
                retries,
            },
        ));
    }
    Err(SimulationError::NoRefills {
        index,
        retries: cfg.max_retries,
    })
}

fn truncate(c: &CovariateProcess, followup: f64) -> Result<CovariateProcess, DataError> {
    let keep = c.change_times().partition_point(|&t| t < followup);
    CovariateProcess::new(
        c.change_times()[..keep].to_vec(),
        (0..keep).map(|i| c.value(i).to_vec()).collect(),
    )
}

/// Censoring time before `tau`, if any, and its probability given the path.
fn draw_censoring(
    cfg: &ScenarioConfig,
    path: &TreatmentPath,
    x0: f64,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> (Option<f64>, f64) {
    let Some(c) = &cfg.censoring else {
        return (None, 0.0);
    };
    let entry = path.dispensations.last_refill();
    let budget = exp1(rng);
    let mut cum = 0.0;
    let mut hit = None;
    for p in path.pieces(tau) {
        if p.end <= entry {
            continue;
        }
        let start = p.start.max(entry);
        let l = path.covariates.value(p.covariate_index);
        let rate = c.baseline_rate * c.gamma.dot(x0, l[0], l[1]).exp();
        let mass = rate * (p.end - start);
        if hit.is_none() && cum + mass >= budget {
            hit = Some(start + (budget - cum) / rate);
        }
        cum += mass;
    }
    (hit.filter(|&t| t < tau), -(-cum).exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::mimicking_time;

    fn small(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            n,
            seed: 7,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_psi_emits_latent_times_exactly() {
        let cfg = ScenarioConfig {
            psi1: 0.0,
            psi2: vec![0.0],
            censoring: None,
            ..small(200)
        };
        let sim = simulate_cohort(&cfg).unwrap();
        for (s, l) in sim.cohort.subjects().iter().zip(&sim.truth.subjects) {
            assert_eq!(l.tau, l.u);
            assert_eq!(s.followup_time(), l.u);
        }
    }

    #[test]
    fn always_on_treatment_scales_time_by_exp_psi1() {
        let cfg = ScenarioConfig {
            psi2: vec![],
            effect_modifiers: vec![],
            refill: RefillLaw::Immediate,
            censoring: None,
            ..small(200)
        };
        let sim = simulate_cohort(&cfg).unwrap();
        for l in &sim.truth.subjects {
            let expected = l.u * (0.5f64).exp();
            assert!((l.tau - expected).abs() <= 1e-9 * expected, "{} vs {}", l.tau, expected);
        }
    }

    #[test]
    fn same_seed_gives_identical_cohorts() {
        let a = simulate_cohort(&small(100)).unwrap();
        let b = simulate_cohort(&small(100)).unwrap();
        assert_eq!(a.cohort, b.cohort);
        assert_eq!(a.truth, b.truth);
        let c = simulate_cohort(&ScenarioConfig { seed: 8, ..small(100) }).unwrap();
        assert_ne!(a.cohort, c.cohort);
    }

    #[test]
    fn round_trip_recovers_latent_u() {
        let cfg = small(300);
        let sim = simulate_cohort(&cfg).unwrap();
        let g = cfg.effect_modifier_map().unwrap();
        for (s, l) in sim.cohort.subjects().iter().zip(&sim.truth.subjects) {
            if s.event() {
                let u = mimicking_time(s, &cfg.psi(), &g, l.tau).unwrap();
                assert!((u - l.u).abs() <= 1e-10 * l.u);
            }
        }
    }

    #[test]
    fn invalid_rates_name_the_field() {
        let mut cfg = small(10);
        cfg.disease.progression_rate = 0.0;
        match simulate_cohort(&cfg) {
            Err(SimulationError::Config { field, .. }) => {
                assert_eq!(field, "disease.progression_rate")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn misspecification_drops_the_confounder() {
        let cfg = ScenarioConfig::default();
        let spec = misspecify(&cfg, Nuisance::RefillHazard).unwrap();
        assert!(!spec.refill_features.contains(&"l2".to_string()));
        assert!(spec.outcome_features.contains(&"l2".to_string()));
        let spec = misspecify(&cfg, Nuisance::OutcomeRegression).unwrap();
        assert!(!spec.outcome_features.contains(&"l2".to_string()));
        let no_effect = ScenarioConfig {
            censoring: None,
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            misspecify(&no_effect, Nuisance::Censoring),
            Err(SimulationError::InactiveCovariate { .. })
        ));
    }

    #[test]
    fn scenario_parses_from_toml() {
        let text = r#"
            n = 50
            seed = 3
            psi1 = -0.5
            coverage_window = 30.0
            baseline_probability = 0.5
            [disease]
            stages = 3
            progression_rate = 0.004
            max_initial_stage = 1
            [marker]
            update_rate = 0.03
            autocorrelation = 0.8
            sd = 1.0
            [refill]
            law = "hazard"
            baseline_rate = 0.05
            gamma = { l2 = -0.5 }
        "#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.n, 50);
        assert!(cfg.censoring.is_none());
        assert_eq!(cfg.correct_spec().refill_features, vec!["l2".to_string()]);
        simulate_cohort(&cfg).unwrap();
    }
}
