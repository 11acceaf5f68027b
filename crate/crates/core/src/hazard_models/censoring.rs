//! Time-dependent Cox model for censoring after the last refill.
//!
//! Subject `i` is at risk on `(V_K, X]` and is an event when `Δ = 0`. Ties use
//! the Breslow convention and the baseline is the Breslow estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dot, FeatureMap, HazardError};
use crate::data_model::{Cohort, HistoryView, SubjectTrajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFitConfig {
    pub max_iterations: usize,
    /// Euclidean norm of the partial-likelihood score at convergence.
    pub score_tolerance: f64,
}

impl Default for CoxFitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            score_tolerance: 1e-8,
        }
    }
}

/// Baseline hazard increment `dΛ_0` at a distinct censoring time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreslowStep {
    pub time: f64,
    pub increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringCoxModel {
    feature_map: FeatureMap,
    gamma: Vec<f64>,
    breslow: Vec<BreslowStep>,
    events: usize,
    log_partial_likelihood: Option<f64>,
    score_norm: f64,
    iterations: usize,
    warning: Option<String>,
}

/// Risk-set rows at one distinct event time.
struct EventTime {
    time: f64,
    deaths: f64,
    death_z: Vec<f64>,
    /// Features of every subject at risk, row-major.
    risk_z: Vec<f64>,
    risk_n: usize,
}

fn features_at(fm: &FeatureMap, s: &SubjectTrajectory, t: f64, out: &mut [f64]) {
    let view = HistoryView::new(s, t);
    fm.eval(&view, 0, out);
}

fn event_times(cohort: &Cohort, fm: &FeatureMap) -> Vec<EventTime> {
    let nf = fm.len();
    let mut times: Vec<f64> = cohort
        .subjects()
        .iter()
        .filter(|s| !s.event())
        .map(|s| s.followup_time())
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let mut z = vec![0.0; nf];
    times
        .into_iter()
        .map(|t| {
            let mut e = EventTime {
                time: t,
                deaths: 0.0,
                death_z: vec![0.0; nf],
                risk_z: Vec::new(),
                risk_n: 0,
            };
            for s in cohort.subjects() {
                let entry = s.dispensations().last_refill();
                if entry < t && t <= s.followup_time() {
                    features_at(fm, s, t, &mut z);
                    e.risk_z.extend_from_slice(&z);
                    e.risk_n += 1;
                    if !s.event() && s.followup_time() == t {
                        e.deaths += 1.0;
                        for (a, x) in e.death_z.iter_mut().zip(&z) {
                            *a += x;
                        }
                    }
                }
            }
            e
        })
        .collect()
}

struct Partial {
    ll: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn partial_likelihood(ev: &[EventTime], gamma: &[f64], derivs: bool) -> Partial {
    let nf = gamma.len();
    let mut ll = 0.0;
    let mut score = DVector::zeros(nf);
    let mut info = DMatrix::zeros(nf, nf);
    let mut s1 = vec![0.0; nf];
    let mut s2 = vec![0.0; nf * nf];
    for e in ev {
        let mut s0 = 0.0;
        s1.iter_mut().for_each(|x| *x = 0.0);
        s2.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..e.risk_n {
            let z = &e.risk_z[r * nf..(r + 1) * nf];
            let w = dot(gamma, z).exp();
            s0 += w;
            if derivs {
                for a in 0..nf {
                    s1[a] += w * z[a];
                    for b in 0..=a {
                        s2[a * nf + b] += w * z[a] * z[b];
                    }
                }
            }
        }
        ll += dot(gamma, &e.death_z) - e.deaths * s0.ln();
        if derivs {
            for a in 0..nf {
                score[a] += e.death_z[a] - e.deaths * s1[a] / s0;
                for b in 0..=a {
                    let v = e.deaths * (s2[a * nf + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                    info[(a, b)] += v;
                    if a != b {
                        info[(b, a)] += v;
                    }
                }
            }
        }
    }
    Partial { ll, score, info }
}

fn breslow(ev: &[EventTime], gamma: &[f64]) -> Vec<BreslowStep> {
    let nf = gamma.len();
    ev.iter()
        .map(|e| {
            let s0: f64 = (0..e.risk_n)
                .map(|r| dot(gamma, &e.risk_z[r * nf..(r + 1) * nf]).exp())
                .sum();
            BreslowStep {
                time: e.time,
                increment: e.deaths / s0,
            }
        })
        .collect()
}

/// Maximizes the partial likelihood by Newton's method with step halving.
pub fn fit_censoring_cox(
    cohort: &Cohort,
    feature_map: FeatureMap,
    cfg: &CoxFitConfig,
) -> Result<CensoringCoxModel, HazardError> {
    let nf = feature_map.len();
    let ev = event_times(cohort, &feature_map);
    if ev.is_empty() {
        return Ok(CensoringCoxModel {
            feature_map,
            gamma: vec![0.0; nf],
            breslow: vec![],
            events: 0,
            log_partial_likelihood: None,
            score_norm: 0.0,
            iterations: 0,
            warning: Some("no censoring events; censoring survival is 1 everywhere".into()),
        });
    }
    let events = ev.iter().map(|e| e.deaths as usize).sum();
    let mut gamma = vec![0.0; nf];
    let mut p = partial_likelihood(&ev, &gamma, true);
    let mut iterations = 0;
    while p.score.norm() >= cfg.score_tolerance {
        if iterations == cfg.max_iterations {
            return Err(HazardError::CoxNotConverged {
                iterations,
                score_norm: p.score.norm(),
            });
        }
        iterations += 1;
        let step = p
            .info
            .clone()
            .cholesky()
            .map(|c| c.solve(&p.score))
            .ok_or(HazardError::CoxNotConverged {
                iterations,
                score_norm: p.score.norm(),
            })?;
        let mut scale = 1.0;
        let mut candidate;
        let mut halvings = 0;
        loop {
            candidate = gamma
                .iter()
                .zip(step.iter())
                .map(|(g, s)| g + scale * s)
                .collect::<Vec<f64>>();
            let ll = partial_likelihood(&ev, &candidate, false).ll;
            if ll.is_finite() && ll >= p.ll - 1e-12 * p.ll.abs().max(1.0) {
                break;
            }
            halvings += 1;
            if halvings > 30 {
                return Err(HazardError::CoxNotConverged {
                    iterations,
                    score_norm: p.score.norm(),
                });
            }
            scale *= 0.5;
        }
        gamma = candidate;
        p = partial_likelihood(&ev, &gamma, true);
    }
    // One Newton step past the score tolerance.
    if let Some(step) = p.info.clone().cholesky().map(|c| c.solve(&p.score)) {
        let polished: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, s)| g + s).collect();
        let q = partial_likelihood(&ev, &polished, true);
        if q.ll.is_finite() && q.score.norm() <= p.score.norm() {
            gamma = polished;
            p = q;
        }
    }
    Ok(CensoringCoxModel {
        breslow: breslow(&ev, &gamma),
        feature_map,
        gamma,
        events,
        log_partial_likelihood: Some(p.ll),
        score_norm: p.score.norm(),
        iterations,
        warning: None,
    })
}

/// Breslow baseline with `γ` held fixed.
pub fn fit_censoring_cox_fixed(
    cohort: &Cohort,
    feature_map: FeatureMap,
    gamma: Vec<f64>,
) -> Result<CensoringCoxModel, HazardError> {
    if gamma.len() != feature_map.len() {
        return Err(HazardError::DimensionMismatch {
            expected: feature_map.len(),
            found: gamma.len(),
        });
    }
    let ev = event_times(cohort, &feature_map);
    let p = partial_likelihood(&ev, &gamma, true);
    Ok(CensoringCoxModel {
        breslow: breslow(&ev, &gamma),
        events: ev.iter().map(|e| e.deaths as usize).sum(),
        warning: ev
            .is_empty()
            .then(|| "no censoring events; censoring survival is 1 everywhere".into()),
        log_partial_likelihood: (!ev.is_empty()).then_some(p.ll),
        score_norm: p.score.norm(),
        feature_map,
        gamma,
        iterations: 0,
    })
}

impl CensoringCoxModel {
    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn breslow(&self) -> &[BreslowStep] {
        &self.breslow
    }

    pub fn events(&self) -> usize {
        self.events
    }

    pub fn log_partial_likelihood(&self) -> Option<f64> {
        self.log_partial_likelihood
    }

    pub fn score_norm(&self) -> f64 {
        self.score_norm
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Set when the cohort had no censoring events.
    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    /// Observed information `-∂²ℓ/∂γ²` at the fitted `γ`, recomputed on `cohort`.
    pub fn information(&self, cohort: &Cohort) -> DMatrix<f64> {
        let ev = event_times(cohort, &self.feature_map);
        partial_likelihood(&ev, &self.gamma, true).info
    }

    /// Product-limit `Ŝ_C(u | H)` over Breslow times in `(V_K, u]`.
    pub fn survival(&self, s: &SubjectTrajectory, u: f64) -> Result<f64, HazardError> {
        let entry = s.dispensations().last_refill();
        if u <= entry {
            return Ok(1.0);
        }
        let mut z = vec![0.0; self.feature_map.len()];
        let lo = self.breslow.partition_point(|b| b.time <= entry);
        let mut surv = 1.0;
        for b in self.breslow[lo..].iter().take_while(|b| b.time <= u) {
            features_at(&self.feature_map, s, b.time, &mut z);
            let factor = 1.0 - b.increment * dot(&self.gamma, &z).exp();
            if !(0.0..=1.0).contains(&factor) {
                return Err(HazardError::InvalidFactor {
                    subject: s.id().to_string(),
                    time: b.time,
                    factor,
                });
            }
            surv *= factor;
        }
        Ok(surv)
    }

    /// `Σ dΛ_0(t) exp{γ' z(t)}` over Breslow times in `(V_K, u]`.
    pub fn cumulative_hazard(&self, s: &SubjectTrajectory, u: f64) -> f64 {
        let entry = s.dispensations().last_refill();
        let mut z = vec![0.0; self.feature_map.len()];
        self.breslow
            .iter()
            .filter(|b| b.time > entry && b.time <= u)
            .map(|b| {
                features_at(&self.feature_map, s, b.time, &mut z);
                b.increment * dot(&self.gamma, &z).exp()
            })
            .sum()
    }
}

/// `Ŝ_C(u | H)`, refusing values below the positivity floor.
pub fn censoring_survival(
    m: &CensoringCoxModel,
    s: &SubjectTrajectory,
    u: f64,
    floor: f64,
) -> Result<f64, HazardError> {
    let surv = m.survival(s, u)?;
    if surv < floor {
        return Err(HazardError::PositivityViolation {
            subject: s.id().to_string(),
            time: u,
            survival: surv,
            floor,
        });
    }
    Ok(surv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{normalize_dispensations, CovariateProcess, Schema};

    fn subject(id: &str, last_refill: f64, x: f64, event: bool, l: f64) -> SubjectTrajectory {
        SubjectTrajectory::new(
            id,
            x,
            event,
            vec![],
            CovariateProcess::constant(vec![l]),
            normalize_dispensations(&[0.0, last_refill], 10.0).unwrap(),
        )
        .unwrap()
    }

    fn schema() -> Schema {
        Schema::new(vec!["l1".into()], vec![])
    }

    #[test]
    fn single_event_with_fixed_zero_gamma_gives_one_over_n() {
        let subjects = vec![
            subject("a", 10.0, 20.0, false, 0.0),
            subject("b", 10.0, 30.0, true, 1.0),
            subject("c", 15.0, 25.0, true, 0.0),
            subject("d", 12.0, 40.0, true, 1.0),
        ];
        let cohort = Cohort::new(schema(), subjects).unwrap();
        let fm = FeatureMap::from_names(&schema(), &["l1".to_string()]).unwrap();
        let m = fit_censoring_cox_fixed(&cohort, fm, vec![0.0]).unwrap();
        assert_eq!(m.breslow().len(), 1);
        assert!((m.breslow()[0].increment - 0.25).abs() < 1e-15);
        let s = &cohort.subjects()[1];
        assert!((m.survival(s, 30.0).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(m.survival(s, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn no_censoring_gives_unit_survival_and_warning() {
        let subjects = vec![
            subject("a", 10.0, 20.0, true, 0.0),
            subject("b", 10.0, 30.0, true, 1.0),
        ];
        let cohort = Cohort::new(schema(), subjects).unwrap();
        let fm = FeatureMap::from_names(&schema(), &["l1".to_string()]).unwrap();
        let m = fit_censoring_cox(&cohort, fm, &CoxFitConfig::default()).unwrap();
        assert!(m.warning().is_some());
        for s in cohort.subjects() {
            assert_eq!(censoring_survival(&m, s, s.followup_time(), 0.05).unwrap(), 1.0);
        }
    }

    #[test]
    fn positivity_floor_names_the_subject() {
        let subjects = vec![
            subject("a", 10.0, 20.0, false, 0.0),
            subject("b", 10.0, 30.0, true, 0.0),
        ];
        let cohort = Cohort::new(schema(), subjects).unwrap();
        let m = fit_censoring_cox_fixed(&cohort, FeatureMap::empty(), vec![]).unwrap();
        let err = censoring_survival(&m, &cohort.subjects()[1], 30.0, 0.6).unwrap_err();
        assert!(matches!(err, HazardError::PositivityViolation { subject, .. } if subject == "b"));
    }

    /// Score of the Breslow partial likelihood for one constant feature, by direct loops.
    fn oracle_score(rows: &[(f64, f64, bool, f64)], g: f64) -> f64 {
        let mut score = 0.0;
        for &(_, t, ev, z) in rows.iter().filter(|r| !r.2) {
            let _ = ev;
            let (mut s0, mut s1) = (0.0, 0.0);
            for &(entry, x, _, zz) in rows {
                if entry < t && t <= x {
                    s0 += (g * zz).exp();
                    s1 += zz * (g * zz).exp();
                }
            }
            score += z - s1 / s0;
        }
        score
    }

    #[test]
    fn newton_fit_matches_bisection_on_the_score() {
        let rows = [
            (10.0, 20.0, false, 1.0),
            (10.0, 30.0, true, 0.0),
            (15.0, 25.0, false, 0.0),
            (12.0, 40.0, false, 1.0),
            (11.0, 35.0, true, 1.0),
        ];
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, &(v, x, e, l))| subject(&format!("s{i}"), v, x, e, l))
            .collect();
        let cohort = Cohort::new(schema(), subjects).unwrap();
        let fm = FeatureMap::from_names(&schema(), &["l1".to_string()]).unwrap();
        let m = fit_censoring_cox(&cohort, fm, &CoxFitConfig::default()).unwrap();
        let (mut lo, mut hi) = (-10.0, 10.0);
        assert!(oracle_score(&rows, lo) > 0.0 && oracle_score(&rows, hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if oracle_score(&rows, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((m.gamma()[0] - 0.5 * (lo + hi)).abs() < 1e-10);
        assert_eq!(m.events(), 3);
    }
}
