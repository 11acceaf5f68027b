//! Run configuration files.
//!
//! Both files are TOML. Relative paths are resolved against the directory of
//! the configuration file.
//!
//! `simulate`:
//!
//! ```toml
//! output_dir = "data"
//! [scenario]          # merged over ScenarioConfig::default()
//! seed = 7
//! n = 500
//! censoring = "none"  # drops the censoring law
//! ```
//!
//! `estimate` and `diagnose`:
//!
//! ```toml
//! input_dir = "data"  # or covariates / dispensations / outcomes paths
//! output = "result.json"
//! seed = 7
//! threads = 0
//! coverage_window = 30.0
//! [model]             # ModelSpec
//! effect_modifiers = ["l1"]
//! refill_features = ["x0_1", "l1", "l2"]
//! [estimator]         # EstimatorConfig, every field optional
//! bootstrap_replicates = 200
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ctsftm::data_model::{CohortFiles, Schema, DEFAULT_EPSILON};
use ctsftm::estimator::{EstimatorConfig, ModelSpec, ACCRUED, GAP_CLOCK};
use ctsftm::hazard_models::REFILL_INDEX;
use ctsftm::simulation::ScenarioConfig;
use serde::Deserialize;
use toml::{Table, Value};

use crate::CliError;

fn read(path: &Path) -> Result<(String, PathBuf), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok((text, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_table(text: &str, path: &Path) -> Result<Table, CliError> {
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Overlays `user` on `base`. Tables merge key by key unless their `law`
/// tags differ, in which case the user's table replaces the default.
fn merge(base: &mut Table, user: Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) if b.get("law") == u.get("law") || !u.contains_key("law") => {
                merge(b, u)
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub struct SimulateConfig {
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    /// False when the file leaves the seed to its default.
    pub seed_given: bool,
}

impl SimulateConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let (text, base) = read(path)?;
        let mut top = parse_table(&text, path)?;
        let output_dir = match top.remove("output_dir") {
            Some(Value::String(s)) => resolve(&base, Path::new(&s)),
            Some(_) => return Err(config_field("output_dir", "must be a string")),
            None => return Err(config_field("output_dir", "is required")),
        };
        let mut user = match top.remove("scenario") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(config_field("scenario", "must be a table")),
            None => Table::new(),
        };
        if let Some(key) = top.keys().next() {
            return Err(config_field(key, "unknown key"));
        }
        let seed_given = user.contains_key("seed");
        let drop_censoring = match user.get("censoring") {
            Some(Value::String(s)) if s == "none" => true,
            Some(Value::String(s)) => {
                return Err(config_field("scenario.censoring", format!("unknown value {s:?}")))
            }
            _ => false,
        };
        if drop_censoring {
            user.remove("censoring");
        }
        let mut merged = Table::try_from(ScenarioConfig::default())
            .map_err(|e| CliError::Config(e.to_string()))?;
        if drop_censoring {
            merged.remove("censoring");
        }
        merge(&mut merged, user);
        let scenario = ScenarioConfig::from_toml(&merged.to_string())?;
        Ok(Self {
            output_dir,
            scenario,
            seed_given,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    input_dir: Option<PathBuf>,
    covariates: Option<PathBuf>,
    dispensations: Option<PathBuf>,
    outcomes: Option<PathBuf>,
    output: PathBuf,
    /// Written by `estimate`: the fitted refill and censoring models.
    models_output: Option<PathBuf>,
    /// Read by `diagnose`: models to check instead of refitting.
    model_file: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    threads: usize,
    coverage_window: f64,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    /// Appends `k`, `u` and `accrued` to the outcome features.
    #[serde(default = "default_true")]
    outcome_clock_terms: bool,
    model: ModelSpec,
    #[serde(default)]
    estimator: EstimatorConfig,
    #[serde(default)]
    diagnostics: DiagnosticThresholds,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

/// PASS/FAIL thresholds of `diagnose`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticThresholds {
    /// Martingale means pass when within this many standard errors of zero.
    pub mean_z: f64,
    /// Covariation ratios pass when within this distance of one.
    pub covariation_tolerance: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        Self {
            mean_z: 3.0,
            covariation_tolerance: 0.2,
        }
    }
}

/// Settings of `estimate` and `diagnose`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub files: CohortFiles,
    pub output: PathBuf,
    pub models_output: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub coverage_window: f64,
    pub epsilon: f64,
    pub spec: ModelSpec,
    pub estimator: EstimatorConfig,
    pub diagnostics: DiagnosticThresholds,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let (text, base) = read(path)?;
        let raw: RawRunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let dir = raw.input_dir.as_ref().map(|d| resolve(&base, d));
        let table = |name: &str, explicit: &Option<PathBuf>| -> Result<PathBuf, CliError> {
            match (explicit, &dir) {
                (Some(p), _) => Ok(resolve(&base, p)),
                (None, Some(d)) => Ok(d.join(format!("{name}.csv"))),
                (None, None) => Err(config_field(name, "is required without input_dir")),
            }
        };
        let files = CohortFiles {
            covariates: table("covariates", &raw.covariates)?,
            dispensations: table("dispensations", &raw.dispensations)?,
            outcomes: table("outcomes", &raw.outcomes)?,
        };
        if !(raw.coverage_window > 0.0 && raw.coverage_window.is_finite()) {
            return Err(config_field("coverage_window", "must be positive"));
        }
        let spec = if raw.outcome_clock_terms {
            raw.model.with_clock_terms()
        } else {
            raw.model
        };
        Ok(Self {
            files,
            output: resolve(&base, &raw.output),
            models_output: raw.models_output.map(|p| resolve(&base, &p)),
            model_file: raw.model_file.map(|p| resolve(&base, &p)),
            seed: raw.seed,
            threads: raw.threads,
            coverage_window: raw.coverage_window,
            epsilon: raw.epsilon,
            spec,
            estimator: raw.estimator,
            diagnostics: raw.diagnostics,
        })
    }

    /// Every referenced name must exist in the ingested schema.
    pub fn check_names(&self, schema: &Schema) -> Result<(), CliError> {
        let known = |n: &str| schema.covariate_index(n).is_some() || schema.baseline_index(n).is_some();
        for n in &self.spec.effect_modifiers {
            if schema.covariate_index(n).is_none() {
                return Err(config_field("model.effect_modifiers", format!("{n:?} is not a covariate")));
            }
        }
        for n in &self.spec.refill_features {
            if !(known(n) || n == REFILL_INDEX) {
                return Err(config_field("model.refill_features", format!("unknown name {n:?}")));
            }
        }
        for n in &self.spec.censoring_features {
            if !known(n) {
                return Err(config_field("model.censoring_features", format!("unknown name {n:?}")));
            }
        }
        for n in &self.spec.outcome_features {
            if !(known(n) || [REFILL_INDEX, GAP_CLOCK, ACCRUED].contains(&n.as_str())) {
                return Err(config_field("model.outcome_features", format!("unknown name {n:?}")));
            }
        }
        Ok(())
    }
}

fn config_field(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("invalid field `{field}`: {message}"))
}
