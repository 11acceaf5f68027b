//! Nuisance models: the refill hazard on the gap clock and the censoring Cox
//! model on the calendar clock.
//!
//! Both consume features through a [`FeatureMap`], which reads history via a
//! [`HistoryView`] so that no feature can see past its evaluation time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{DataError, HistoryView, Schema};

mod censoring;
mod refill;

pub use censoring::{
    censoring_survival, fit_censoring_cox, fit_censoring_cox_fixed, BreslowStep,
    CensoringCoxModel, CoxFitConfig,
};
pub use refill::{
    cumulative_refill_hazard, fit_refill_hazard, gap_observations, refill_hazard_at,
    BaselineCuts, FeaturePiece, GapObservation, PiecewiseConstantBaseline, RefillFitConfig,
    RefillHazardModel,
};

/// Version tag written into exported model files.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Error)]
pub enum HazardError {
    #[error("feature {0:?} has zero variance")]
    DegenerateFeature(String),
    #[error("every completed gap is shorter than {threshold} days; the refill hazard is not estimable")]
    DegenerateGaps { threshold: f64 },
    #[error("no completed gaps to fit")]
    NoEvents,
    #[error("baseline piece {piece} contains no refills")]
    EmptyPiece { piece: usize },
    #[error("refill hazard fit did not converge in {iterations} iterations")]
    RefillNotConverged {
        iterations: usize,
        last: Box<RefillHazardModel>,
    },
    #[error("censoring Cox fit did not converge in {iterations} iterations (score norm {score_norm:e})")]
    CoxNotConverged { iterations: usize, score_norm: f64 },
    #[error("subject {subject}: censoring survival {survival} at time {time} is below the positivity floor {floor}")]
    PositivityViolation {
        subject: String,
        time: f64,
        survival: f64,
        floor: f64,
    },
    #[error("subject {subject}: product-limit factor {factor} at time {time} lies outside [0, 1]")]
    InvalidFactor {
        subject: String,
        time: f64,
        factor: f64,
    },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("feature {0:?} is not available in this model")]
    UnsupportedFeature(String),
    #[error("invalid baseline: {0}")]
    InvalidBaseline(String),
    #[error("feature vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Where a model feature is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Time-varying covariate column.
    Covariate(usize),
    /// Baseline covariate column.
    Baseline(usize),
    /// The refill index `k` of the current gap.
    RefillIndex,
    /// Treatment status just before the evaluation time, `A_{t-}`.
    TreatmentBefore,
}

/// Name used for [`FeatureSource::RefillIndex`].
pub const REFILL_INDEX: &str = "k";
/// Name used for [`FeatureSource::TreatmentBefore`].
pub const TREATMENT_BEFORE: &str = "a";

/// Ordered, named feature vector built from a subject's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FeatureMap {
    names: Vec<String>,
    sources: Vec<FeatureSource>,
}

impl FeatureMap {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(names: Vec<String>, sources: Vec<FeatureSource>) -> Self {
        assert_eq!(names.len(), sources.len());
        Self { names, sources }
    }

    /// Resolves names against a schema: covariate columns, baseline columns,
    /// `"k"` for the refill index and `"a"` for `A_{t-}`.
    pub fn from_names(schema: &Schema, names: &[String]) -> Result<Self, HazardError> {
        let sources = names
            .iter()
            .map(|n| {
                if n == REFILL_INDEX {
                    Ok(FeatureSource::RefillIndex)
                } else if n == TREATMENT_BEFORE {
                    Ok(FeatureSource::TreatmentBefore)
                } else if let Some(i) = schema.covariate_index(n) {
                    Ok(FeatureSource::Covariate(i))
                } else if let Some(i) = schema.baseline_index(n) {
                    Ok(FeatureSource::Baseline(i))
                } else {
                    Err(HazardError::UnknownFeature(n.clone()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            names: names.to_vec(),
            sources,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sources(&self) -> &[FeatureSource] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Features at the view's cutoff.
    pub fn eval(&self, view: &HistoryView, k: usize, out: &mut [f64]) {
        self.fill(view, view.covariates(), k, out);
    }

    /// Features using the covariate vector at change-point `covariate_index`,
    /// which must already be in force at the cutoff.
    pub fn eval_indexed(&self, view: &HistoryView, covariate_index: usize, k: usize, out: &mut [f64]) {
        let l = view.covariates_by_index(covariate_index);
        self.fill(view, l, k, out);
    }

    fn fill(&self, view: &HistoryView, l: &[f64], k: usize, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.sources) {
            *o = match *s {
                FeatureSource::Covariate(i) => l[i],
                FeatureSource::Baseline(i) => view.baseline()[i],
                FeatureSource::RefillIndex => k as f64,
                FeatureSource::TreatmentBefore => f64::from(u8::from(view.treated_before())),
            };
        }
    }

    /// The map with every feature named `name` removed.
    pub fn without(&self, name: &str) -> Self {
        let (names, sources) = self
            .names
            .iter()
            .zip(&self.sources)
            .filter(|(n, _)| n.as_str() != name)
            .map(|(n, s)| (n.clone(), *s))
            .unzip();
        Self { names, sources }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exported nuisance models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refill: Option<RefillHazardModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censoring: Option<CensoringCoxModel>,
}

impl ModelFile {
    pub fn new(refill: Option<RefillHazardModel>, censoring: Option<CensoringCoxModel>) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            refill,
            censoring,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("models serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, HazardError> {
        let file: Self =
            serde_json::from_str(text).map_err(|e| HazardError::ModelFile(e.to_string()))?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(HazardError::ModelFile(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        Ok(file)
    }
}
