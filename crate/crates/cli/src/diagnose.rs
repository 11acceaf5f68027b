//! `diagnose`: checks of the fitted refill and censoring models.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ctsftm::data_model::Cohort;
use ctsftm::estimator::{with_threads, WeightSummary};
use ctsftm::hazard_models::{
    fit_censoring_cox, fit_refill_hazard, gap_observations, CensoringCoxModel, FeatureMap,
    ModelFile, RefillHazardModel,
};
use ctsftm::martingale::{
    cohort_martingale_totals, covariation_diagnostic, Constant, CovariationReport, MeanReport,
};
use serde::Serialize;

use crate::commands::{load_run, write_file, write_metadata};
use crate::config::{DiagnosticThresholds, RunConfig};
use crate::CliError;

/// Version tag of the diagnostics JSON.
pub const DIAGNOSTICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Serialize)]
struct MartingaleCheck {
    #[serde(flatten)]
    report: MeanReport,
    z: f64,
    status: Status,
}

#[derive(Debug, Serialize)]
struct CovariationCheck {
    /// The integrands of both stochastic integrals.
    integrands: &'static str,
    #[serde(flatten)]
    report: CovariationReport,
    status: Status,
}

#[derive(Debug, Serialize)]
struct Violation {
    subject: String,
    followup_time: f64,
    survival: f64,
}

#[derive(Debug, Serialize)]
struct PositivityCheck {
    floor: f64,
    min_survival: f64,
    violations: Vec<Violation>,
    status: Status,
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    schema_version: u32,
    subjects: usize,
    /// `"file"` or `"fitted"`, per model.
    refill_source: &'static str,
    censoring_source: &'static str,
    martingale: MartingaleCheck,
    covariation: CovariationCheck,
    weights: WeightSummary,
    positivity: PositivityCheck,
    thresholds: DiagnosticThresholds,
}

fn load_models(cfg: &RunConfig) -> Result<(Option<RefillHazardModel>, Option<CensoringCoxModel>), CliError> {
    let Some(path) = &cfg.model_file else {
        return Ok((None, None));
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let file = ModelFile::from_json(&text)?;
    Ok((file.refill, file.censoring))
}

fn check_features(cohort: &Cohort, stored: &FeatureMap, which: &str) -> Result<(), CliError> {
    let resolved = FeatureMap::from_names(cohort.schema(), stored.names())?;
    if &resolved != stored {
        return Err(CliError::Input(format!(
            "{which} model features {:?} do not match the cohort schema",
            stored.names()
        )));
    }
    Ok(())
}

fn diagnostics(cfg: &RunConfig, cohort: &Cohort) -> Result<Diagnostics, CliError> {
    let (file_refill, file_censoring) = load_models(cfg)?;
    let censoring_source = if file_censoring.is_some() { "file" } else { "fitted" };
    let refill_source = if file_refill.is_some() { "file" } else { "fitted" };
    let censoring = match file_censoring {
        Some(m) => {
            check_features(cohort, m.feature_map(), "censoring")?;
            m
        }
        None => {
            let fm = FeatureMap::from_names(cohort.schema(), &cfg.spec.censoring_features)?;
            fit_censoring_cox(cohort, fm, &cfg.estimator.censoring)?
        }
    };

    let floor = cfg.estimator.positivity_floor;
    let mut violations = Vec::new();
    let mut min_survival = f64::INFINITY;
    let mut weights = Vec::with_capacity(cohort.len());
    let mut fit_weights = Vec::with_capacity(cohort.len());
    for s in cohort.subjects() {
        if !s.event() {
            weights.push(0.0);
            fit_weights.push(0.0);
            continue;
        }
        let surv = censoring.survival(s, s.followup_time())?;
        min_survival = min_survival.min(surv);
        if surv < floor {
            violations.push(Violation {
                subject: s.id().to_string(),
                followup_time: s.followup_time(),
                survival: surv,
            });
            weights.push(0.0);
            fit_weights.push(1.0 / floor);
        } else {
            weights.push(1.0 / surv);
            fit_weights.push(1.0 / surv);
        }
    }
    if !min_survival.is_finite() {
        return Err(CliError::Input("no uncensored subjects".into()));
    }

    let refill = match file_refill {
        Some(m) => {
            check_features(cohort, m.feature_map(), "refill")?;
            m
        }
        None => {
            let fm = FeatureMap::from_names(cohort.schema(), &cfg.spec.refill_features)?;
            let obs = gap_observations(cohort, &fm, Some(&fit_weights));
            fit_refill_hazard(&obs, fm, &cfg.estimator.refill)?
        }
    };

    let totals = cohort_martingale_totals(cohort, &refill).map_err(|e| CliError::Input(e.to_string()))?;
    let report = MeanReport::from_values(&totals);
    let z = report.mean / report.se;
    let thresholds = cfg.diagnostics;
    let one = Constant(vec![1.0]);
    let cov = covariation_diagnostic(&one, &one, cohort, &refill).map_err(|e| CliError::Input(e.to_string()))?;
    let cov_ok = cov
        .ratio
        .is_some_and(|r| (r - 1.0).abs() <= thresholds.covariation_tolerance);

    Ok(Diagnostics {
        schema_version: DIAGNOSTICS_SCHEMA_VERSION,
        subjects: cohort.len(),
        refill_source,
        censoring_source,
        martingale: MartingaleCheck {
            report,
            z,
            status: Status::from_bool(report.within(thresholds.mean_z)),
        },
        covariation: CovariationCheck {
            integrands: "1, 1",
            report: cov,
            status: Status::from_bool(cov_ok),
        },
        weights: WeightSummary::new(&weights),
        positivity: PositivityCheck {
            floor,
            min_survival,
            status: Status::from_bool(violations.is_empty()),
            violations,
        },
        thresholds,
    })
}

pub fn run(path: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, cohort, _) = load_run(path)?;
    let report = with_threads(cfg.threads, || diagnostics(&cfg, &cohort))??;
    let json = serde_json::to_string_pretty(&report).expect("diagnostics serialize");
    write_file(&cfg.output, &json)?;
    write_metadata("diagnose", path, &cfg.output, started)?;
    log::info!(
        "martingale {:?}, covariation {:?}, positivity {:?}",
        report.martingale.status,
        report.covariation.status,
        report.positivity.status
    );
    Ok(())
}
