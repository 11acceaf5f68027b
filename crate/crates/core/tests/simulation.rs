use ctsftm::simulation::{simulate_cohort, Coefficients, RefillLaw, ScenarioConfig};

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn pooled_gaps_match_the_true_refill_rate() {
    let rate = 1.0 / 30.0;
    let cfg = ScenarioConfig {
        n: 3000,
        seed: 41,
        refill: RefillLaw::Hazard {
            baseline_rate: rate,
            gamma: Coefficients::default(),
        },
        ..ScenarioConfig::default()
    };
    let sim = simulate_cohort(&cfg).unwrap();
    // Subjects are redrawn until a first refill occurs, so only later gaps
    // are free of that selection.
    let (mut events, mut exposure) = (0.0, 0.0);
    for s in sim.cohort.subjects() {
        for w in s.gap_windows().into_iter().filter(|w| w.k >= 2) {
            events += f64::from(u8::from(w.completed));
            exposure += w.length;
        }
    }
    let estimate = events / exposure;
    let se = estimate / events.sqrt();
    let z = (estimate - rate) / se;
    assert!(z.abs() <= 3.0, "rate {estimate} vs {rate}, z = {z}");
}

#[test]
fn censoring_fraction_matches_its_analytic_target() {
    let cfg = ScenarioConfig {
        n: 3000,
        seed: 42,
        ..ScenarioConfig::default()
    };
    let sim = simulate_cohort(&cfg).unwrap();
    let residuals: Vec<f64> = sim
        .cohort
        .subjects()
        .iter()
        .zip(&sim.truth.subjects)
        .map(|(s, l)| f64::from(u8::from(!s.event())) - l.censoring_probability)
        .collect();
    let (mean, se) = mean_se(&residuals);
    assert!(mean.abs() <= 3.0 * se, "mean residual {mean}, se {se}");
    let censored = sim.cohort.subjects().iter().filter(|s| !s.event()).count();
    assert!(censored > 0);
}
