//! Simulates one cohort, fits the point estimate and prints timings.
//!
//! `cargo run --release -p ctsftm --example pipeline -- [n] [seed] [simple|optimal]`

use std::time::Instant;

use ctsftm::estimator::{fit_nuisances, fit_point, EstimatingEquation, EstimatorConfig, IndexChoice};
use ctsftm::simulation::{simulate_cohort, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ScenarioConfig::default();
    if let Some(n) = args.get(1) {
        cfg.n = n.parse().expect("n");
    }
    if let Some(seed) = args.get(2) {
        cfg.seed = seed.parse().expect("seed");
    }
    let mut est = EstimatorConfig::default();
    if args.get(3).map(String::as_str) == Some("optimal") {
        est.index_choice = IndexChoice::Optimal;
    }
    let t = Instant::now();
    let sim = simulate_cohort(&cfg).expect("simulation");
    let cohort = &sim.cohort;
    let censored = cohort.subjects().iter().filter(|s| !s.event()).count();
    let gaps: usize = cohort.subjects().iter().map(|s| s.dispensations().refill_count()).sum();
    println!(
        "simulated n={} censored={:.3} mean refills={:.2} in {:?}",
        cohort.len(),
        censored as f64 / cohort.len() as f64,
        gaps as f64 / cohort.len() as f64,
        t.elapsed()
    );
    let spec = cfg.correct_spec();
    let t = Instant::now();
    let nuisances = fit_nuisances(cohort, &spec, &est).expect("nuisances");
    println!("nuisances in {:?}", t.elapsed());
    let eq = EstimatingEquation::new(cohort, &spec, &nuisances, &est).expect("equation");
    let t = Instant::now();
    eq.ee(&cfg.psi()).expect("ee");
    println!("one EE evaluation in {:?}", t.elapsed());
    let t = Instant::now();
    match fit_point(cohort, &spec, &est, None) {
        Ok((_, s)) => println!(
            "psi_hat={:?} (true {:?}) iterations={} |EE|={:.2e} in {:?}",
            s.psi.to_vec(),
            cfg.psi().to_vec(),
            s.iterations,
            s.ee_norm,
            t.elapsed()
        ),
        Err(e) => println!("estimation failed: {e}"),
    }
}
