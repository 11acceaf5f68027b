use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ctsftm::data_model::{read_cohort, write_cohort, Cohort, CohortFiles};
use ctsftm::estimator::{
    estimate as run_estimate, fit_nuisances, unconverged_result, with_threads, EstimatorError,
};
use ctsftm::hazard_models::ModelFile;
use ctsftm::simulation::simulate_cohort;
use serde::Serialize;

use crate::config::{RunConfig, SimulateConfig};
use crate::CliError;

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn simulate(path: &Path) -> Result<(), CliError> {
    let cfg = SimulateConfig::load(path)?;
    if !cfg.seed_given {
        log::warn!("no seed given; using seed 0");
    }
    let sim = simulate_cohort(&cfg.scenario)?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", cfg.output_dir.display())))?;
    write_cohort(&sim.cohort, &CohortFiles::in_dir(&cfg.output_dir))?;
    write_file(&cfg.output_dir.join("truth.json"), &sim.truth.to_json())?;
    log::info!(
        "wrote {} subjects to {}",
        sim.cohort.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

/// Loads the configuration and the cohort it names.
pub fn load_run(path: &Path) -> Result<(RunConfig, Cohort, u64), CliError> {
    let cfg = RunConfig::load(path)?;
    let cohort = read_cohort(&cfg.files, cfg.coverage_window, cfg.epsilon)?;
    cfg.check_names(cohort.schema())?;
    let seed = cfg.seed.unwrap_or_else(|| {
        log::warn!("no seed given; using seed 0");
        0
    });
    log::info!("read {} subjects", cohort.len());
    Ok((cfg, cohort, seed))
}

/// Run details that vary between otherwise identical runs.
#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    config: String,
    finished_unix_seconds: u64,
    elapsed_seconds: f64,
}

/// Writes `<output>.meta.json` next to the result.
pub fn write_metadata(command: &str, config: &Path, output: &Path, started: Instant) -> Result<(), CliError> {
    let meta = Metadata {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: config.display().to_string(),
        finished_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    let mut name = output.as_os_str().to_owned();
    name.push(".meta.json");
    write_file(Path::new(&name), &serde_json::to_string_pretty(&meta).expect("metadata serializes"))
}

pub fn estimate(path: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, cohort, seed) = load_run(path)?;
    let outcome = with_threads(cfg.threads, || {
        run_estimate(&cohort, &cfg.spec, &cfg.estimator, seed).or_else(|e| match e {
            EstimatorError::NotConverged { reason, solution } => {
                let result = unconverged_result(&cohort, &cfg.spec, &cfg.estimator, seed, &solution, &reason)?;
                Ok(result)
            }
            e => Err(e),
        })
    })?;
    let result = outcome?;
    write_file(&cfg.output, &result.to_json())?;
    write_metadata("estimate", path, &cfg.output, started)?;
    if let Some(models) = &cfg.models_output {
        let nuisances = with_threads(cfg.threads, || fit_nuisances(&cohort, &cfg.spec, &cfg.estimator))??;
        let file = ModelFile::new(Some(nuisances.refill), Some(nuisances.censoring));
        write_file(models, &file.to_json())?;
    }
    for w in &result.warnings {
        log::warn!("{w}");
    }
    if !result.converged {
        return Err(CliError::Statistical(format!(
            "estimating equation did not converge; last iterate written to {}",
            cfg.output.display()
        )));
    }
    log::info!(
        "psi = {:?} after {} iterations",
        result.psi_hat,
        result.iterations
    );
    Ok(())
}
