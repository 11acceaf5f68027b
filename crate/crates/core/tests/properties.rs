use std::sync::OnceLock;

use ctsftm::counterfactual::{
    invert_mimicking, mimicking_time, path_mimicking_time, EffectModifierMap, PsiVector,
};
use ctsftm::data_model::{
    normalize_dispensations, read_cohort_from_readers, write_covariates, write_dispensations,
    write_outcomes, Cohort, Schema, DEFAULT_EPSILON,
};
use ctsftm::estimator::{fit_nuisances, EstimatingEquation, EstimatorConfig, Nuisances};
use ctsftm::hazard_models::{FeatureMap, PiecewiseConstantBaseline, RefillHazardModel};
use ctsftm::martingale::{martingale_increments, stochastic_integral, PredictableIntegrand, Quadratic, SegmentContext};
use ctsftm::simulation::{simulate_cohort, ScenarioConfig};
use ctsftm::{CovariateProcess, SubjectTrajectory};
use proptest::prelude::*;

const W: f64 = 30.0;

/// Raw refill times with some early refills, starting at 0.
fn raw_refills() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.5..90.0f64, 1..7).prop_map(|steps| {
        let mut t = 0.0;
        let mut out = vec![0.0];
        for s in steps {
            t += s;
            out.push(t);
        }
        out
    })
}

/// A subject with one covariate `l` and random treatment and covariate paths.
fn subject() -> impl Strategy<Value = SubjectTrajectory> {
    (
        raw_refills(),
        0.1..120.0f64,
        prop::collection::vec((0.0..1.0f64, -2.0..2.0f64), 0..6),
        -2.0..2.0f64,
        any::<bool>(),
    )
        .prop_map(|(raw, tail, changes, l0, event)| {
            let d = normalize_dispensations(&raw, W).unwrap();
            let followup = d.last_refill() + tail;
            let mut times = vec![0.0];
            let mut values = vec![vec![l0]];
            let mut fracs: Vec<(f64, f64)> = changes;
            fracs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for (f, v) in fracs {
                let t = f * followup;
                if t > *times.last().unwrap() + 1e-3 && t < followup {
                    times.push(t);
                    values.push(vec![v]);
                }
            }
            let cov = CovariateProcess::new(times, values).unwrap();
            SubjectTrajectory::new("s", followup, event, vec![], cov, d).unwrap()
        })
}

/// Rounding error of a few operations on values of magnitude `x`.
fn ulps(x: f64) -> f64 {
    4.0 * f64::EPSILON * x.abs().max(1.0)
}

fn schema() -> Schema {
    Schema::new(vec!["l".into()], vec![])
}

fn modifier() -> EffectModifierMap {
    EffectModifierMap::from_schema(&schema(), &["l".to_string()], None).unwrap()
}

fn psi() -> impl Strategy<Value = PsiVector> {
    (-1.5..1.5f64, -1.0..1.0f64).prop_map(|(a, b)| PsiVector::new(a, vec![b]))
}

proptest! {
    #[test]
    fn normalization_is_idempotent(raw in raw_refills()) {
        let once = normalize_dispensations(&raw, W).unwrap();
        let twice = normalize_dispensations(once.refill_times(), W).unwrap();
        prop_assert_eq!(once.refill_times(), twice.refill_times());
        for pair in once.refill_times().windows(2) {
            prop_assert!(pair[1] - pair[0] >= W - ulps(pair[1]));
        }
    }

    #[test]
    fn gaps_are_at_least_epsilon(raw in raw_refills()) {
        let d = normalize_dispensations(&raw, W).unwrap();
        for (&t, &v) in d.gap_times().gaps().iter().zip(&d.refill_times()[1..]) {
            prop_assert!(t > 0.0);
            prop_assert!(t >= DEFAULT_EPSILON - ulps(v));
        }
    }

    #[test]
    fn treatment_starts_exactly_at_refills(raw in raw_refills(), probe in 0.0..1.0f64) {
        let d = normalize_dispensations(&raw, W).unwrap();
        let v = d.refill_times();
        for (t, on) in d.switches() {
            if on {
                prop_assert!(v.contains(&t));
            }
        }
        let u = probe * (d.last_refill() + 2.0 * W);
        let covered = v.iter().any(|&r| u >= r && u < r + W);
        prop_assert_eq!(d.is_treated(u), covered);
    }

    #[test]
    fn coverage_gaps_and_terminal_period_add_up_to_followup(s in subject()) {
        let d = s.dispensations();
        let k = d.refill_count() as f64;
        let gaps: f64 = d.gap_times().gaps().iter().sum();
        let terminal: f64 = s
            .gap_windows()
            .iter()
            .filter(|w| !w.completed)
            .map(|w| w.length)
            .sum();
        // Every gap clock starts ε before its window ends, so each clock
        // double-counts ε of coverage.
        let last = (s.followup_time() - d.last_refill()).min(W - d.epsilon());
        let total = k * (W - d.epsilon()) + gaps + last + terminal;
        prop_assert!((total - s.followup_time()).abs() < 1e-9 * s.followup_time());
    }

    #[test]
    fn covariates_are_right_continuous(s in subject()) {
        let c = s.covariates();
        for (i, &t) in c.change_times().iter().enumerate() {
            prop_assert_eq!(c.covariate_at(t).unwrap(), c.value(i));
            if i > 0 {
                prop_assert_eq!(c.covariate_at(t - 1e-9).unwrap(), c.value(i - 1));
            }
        }
    }

    #[test]
    fn mimicking_time_is_additive_and_increasing(s in subject(), psi in psi(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let g = modifier();
        let (t1, t2) = if a < b { (a, b) } else { (b, a) };
        let (t1, t2) = (t1 * s.followup_time(), t2 * s.followup_time());
        let whole = path_mimicking_time(s.path(), &psi, &g, 0.0, t2).unwrap();
        let left = path_mimicking_time(s.path(), &psi, &g, 0.0, t1).unwrap();
        let right = path_mimicking_time(s.path(), &psi, &g, t1, t2).unwrap();
        prop_assert!((left + right - whole).abs() <= 1e-10 * (1.0 + whole));
        if t2 > t1 {
            prop_assert!(whole > left);
        }
    }

    #[test]
    fn zero_psi_is_the_identity(s in subject(), h in 0.0..1.0f64) {
        let g = modifier();
        let horizon = h * s.followup_time();
        prop_assert_eq!(mimicking_time(&s, &PsiVector::zeros(1), &g, horizon).unwrap(), horizon);
    }

    #[test]
    fn inversion_is_increasing_and_inverts(s in subject(), psi in psi(), a in 0.01..1.0f64, b in 0.01..1.0f64) {
        let g = modifier();
        let full = mimicking_time(&s, &psi, &g, s.followup_time()).unwrap();
        let (u1, u2) = if a < b { (a * full, b * full) } else { (b * full, a * full) };
        let t1 = invert_mimicking(u1, s.path(), &psi, &g).unwrap();
        let t2 = invert_mimicking(u2, s.path(), &psi, &g).unwrap();
        if u2 > u1 {
            prop_assert!(t2 > t1);
        }
        let back = mimicking_time(&s, &psi, &g, t1.min(s.followup_time())).unwrap();
        prop_assert!((back - u1).abs() <= 1e-10 * (1.0 + u1));
    }

    #[test]
    fn martingale_segments_are_non_negative_and_jumps_unit(s in subject(), rate in 0.001..0.2f64, gamma in -1.0..1.0f64) {
        let m = model(rate, gamma);
        let inc = martingale_increments(&s, &m).unwrap();
        let jumps = inc.gaps.iter().filter(|g| g.jump).count();
        prop_assert_eq!(jumps, s.dispensations().refill_count());
        for g in &inc.gaps {
            let covered: f64 = g.segments.iter().map(|x| x.end - x.start).sum();
            prop_assert!((covered - g.length).abs() <= 1e-9 * (1.0 + g.length));
            for seg in &g.segments {
                prop_assert!(seg.mass >= 0.0 && seg.mass.is_finite());
            }
        }
    }

    #[test]
    fn integrals_do_not_depend_on_the_partition(s in subject(), breaks in prop::collection::vec(0.0..150.0f64, 0..8)) {
        let inc = martingale_increments(&s, &model(0.04, 0.3)).unwrap();
        let a = stochastic_integral(&Ramp, &s, &inc).unwrap()[0];
        let b = stochastic_integral(&Ramp, &s, &inc.refined(&breaks)).unwrap()[0];
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}

fn model(rate: f64, gamma: f64) -> RefillHazardModel {
    let fm = FeatureMap::from_names(&schema(), &["l".to_string()]).unwrap();
    RefillHazardModel::new(fm, PiecewiseConstantBaseline::new(vec![5.0], vec![rate, 2.0 * rate]).unwrap(), vec![gamma])
        .unwrap()
}

/// `f(u) = l + u / 10` on the gap clock.
struct Ramp;

impl PredictableIntegrand for Ramp {
    fn dim(&self) -> usize {
        1
    }

    fn on_segment(&self, ctx: &SegmentContext, out: &mut [Quadratic]) {
        out[0] = [ctx.view.covariates()[0], 0.1, 0.0];
    }
}

fn fitted() -> &'static (ScenarioConfig, Cohort, Nuisances) {
    static CELL: OnceLock<(ScenarioConfig, Cohort, Nuisances)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ScenarioConfig {
            n: 300,
            seed: 77,
            ..ScenarioConfig::default()
        };
        let cohort = simulate_cohort(&cfg).unwrap().cohort;
        let nu = fit_nuisances(&cohort, &cfg.correct_spec(), &EstimatorConfig::default()).unwrap();
        (cfg, cohort, nu)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn censored_subjects_never_move_the_equation(psi in psi(), donor in 0usize..300) {
        let (cfg, cohort, nu) = fitted();
        let spec = cfg.correct_spec();
        let est = EstimatorConfig::default();
        let uncensored: Vec<&SubjectTrajectory> = cohort.subjects().iter().filter(|s| s.event()).collect();
        let replacement = uncensored[donor % uncensored.len()];
        let swapped: Vec<SubjectTrajectory> = cohort
            .subjects()
            .iter()
            .map(|s| if s.event() { s.clone() } else { replacement.clone() })
            .collect();
        let other = Cohort::new(cohort.schema().clone(), swapped).unwrap();
        let a = EstimatingEquation::new(cohort, &spec, nu, &est).unwrap();
        let b = EstimatingEquation::new(&other, &spec, nu, &est).unwrap();
        prop_assert_eq!(a.ee(&psi).unwrap(), b.ee(&psi).unwrap());
    }

    #[test]
    fn simple_index_scale_multiplies_the_equation(psi in psi(), scale in 0.01..100.0f64) {
        let (cfg, cohort, nu) = fitted();
        let spec = cfg.correct_spec();
        let base = EstimatorConfig::default();
        let scaled = EstimatorConfig { simple_index_scale: scale, ..base.clone() };
        let a = EstimatingEquation::new(cohort, &spec, nu, &base).unwrap().ee(&psi).unwrap();
        let b = EstimatingEquation::new(cohort, &spec, nu, &scaled).unwrap().ee(&psi).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * scale - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn censoring_survival_is_a_non_increasing_probability(i in 0usize..300, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (_, cohort, nu) = fitted();
        let s = &cohort.subjects()[i];
        let start = s.dispensations().last_refill();
        let span = s.followup_time() - start;
        let (u1, u2) = if a < b { (a, b) } else { (b, a) };
        let s1 = nu.censoring.survival(s, start + u1 * span).unwrap();
        let s2 = nu.censoring.survival(s, start + u2 * span).unwrap();
        prop_assert!(s1 > 0.0 && s1 <= 1.0);
        prop_assert!(s2 <= s1);
        for step in nu.censoring.breslow() {
            prop_assert!(step.increment >= 0.0 && step.increment <= 1.0);
        }
    }

    #[test]
    fn cohorts_round_trip_through_csv(seed in 0u64..1000) {
        let cfg = ScenarioConfig { n: 15, seed, ..ScenarioConfig::default() };
        let cohort = simulate_cohort(&cfg).unwrap().cohort;
        let mut cov = Vec::new();
        let mut disp = Vec::new();
        let mut out = Vec::new();
        write_covariates(&cohort, &mut cov).unwrap();
        write_dispensations(&cohort, &mut disp).unwrap();
        write_outcomes(&cohort, &mut out).unwrap();
        let back = read_cohort_from_readers(&cov[..], &disp[..], &out[..], cfg.coverage_window, cfg.epsilon).unwrap();
        prop_assert_eq!(back.subjects(), cohort.subjects());
    }
}
