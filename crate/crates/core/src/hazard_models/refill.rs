//! Proportional-hazards model for refills on the gap clock,
//! `λ(u | H) = λ_0(u) exp{γ' z}`, with a piecewise-constant `λ_0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{dot, FeatureMap, FeatureSource, HazardError};
use crate::data_model::{Cohort, DataError, HistoryView, SubjectTrajectory};
use crate::linalg::newton_step;

/// Step function on the gap clock: `rates[j]` on `[cuts[j-1], cuts[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstantBaseline {
    cuts: Vec<f64>,
    rates: Vec<f64>,
}

impl PiecewiseConstantBaseline {
    /// `cuts` are the interior cut points, so `rates.len() == cuts.len() + 1`.
    pub fn new(cuts: Vec<f64>, rates: Vec<f64>) -> Result<Self, HazardError> {
        if rates.len() != cuts.len() + 1 {
            return Err(HazardError::InvalidBaseline(format!(
                "{} cut points need {} rates, got {}",
                cuts.len(),
                cuts.len() + 1,
                rates.len()
            )));
        }
        let mut prev = 0.0;
        for &c in &cuts {
            if !(c > prev) || !c.is_finite() {
                return Err(HazardError::InvalidBaseline(
                    "cut points must increase strictly from 0".into(),
                ));
            }
            prev = c;
        }
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(HazardError::InvalidBaseline("rates must be finite and non-negative".into()));
        }
        Ok(Self { cuts, rates })
    }

    pub fn constant(rate: f64) -> Result<Self, HazardError> {
        Self::new(vec![], vec![rate])
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn pieces(&self) -> usize {
        self.rates.len()
    }

    pub fn piece(&self, u: f64) -> usize {
        self.cuts.partition_point(|&c| c <= u)
    }

    pub fn rate(&self, u: f64) -> f64 {
        self.rates[self.piece(u)]
    }

    /// `∫_0^u λ_0`.
    pub fn cumulative(&self, u: f64) -> f64 {
        let mut total = 0.0;
        let mut lo = 0.0;
        for (j, &r) in self.rates.iter().enumerate() {
            let hi = self.cuts.get(j).copied().unwrap_or(f64::INFINITY);
            if u <= lo {
                break;
            }
            total += r * (u.min(hi) - lo);
            lo = hi;
        }
        total
    }
}

/// How the baseline cut points are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineCuts {
    /// Equal-count quantiles of the completed gap lengths.
    Quantiles(usize),
    /// Fixed interior cut points.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefillFitConfig {
    pub cuts: BaselineCuts,
    pub max_iterations: usize,
    /// Convergence when the largest Newton step component falls below this.
    pub step_tolerance: f64,
    /// Completed gaps no longer than this carry no timing information.
    pub degenerate_gap: f64,
}

impl Default for RefillFitConfig {
    fn default() -> Self {
        Self {
            cuts: BaselineCuts::Quantiles(5),
            max_iterations: 50,
            step_tolerance: 1e-10,
            degenerate_gap: 1e-5,
        }
    }
}

/// Features in force from gap-clock time `start` until the next piece.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePiece {
    pub start: f64,
    pub features: Vec<f64>,
}

/// One gap as seen by the refill likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct GapObservation {
    pub length: f64,
    /// Whether the gap ends in a refill.
    pub event: bool,
    pub weight: f64,
    pub pieces: Vec<FeaturePiece>,
}

impl GapObservation {
    /// A gap with features constant throughout.
    pub fn constant(length: f64, event: bool, features: Vec<f64>) -> Self {
        Self {
            length,
            event,
            weight: 1.0,
            pieces: vec![FeaturePiece {
                start: 0.0,
                features,
            }],
        }
    }
}

/// Builds likelihood records from a cohort.
///
/// Without weights every completed gap enters with weight 1 and terminal
/// periods are dropped. With `subject_weights`, every window of subject `i`
/// (the terminal one as right-censored) enters with weight
/// `subject_weights[i]`, and zero-weight subjects are skipped.
pub fn gap_observations(
    cohort: &Cohort,
    feature_map: &FeatureMap,
    subject_weights: Option<&[f64]>,
) -> Vec<GapObservation> {
    let mut out = Vec::new();
    for (i, s) in cohort.subjects().iter().enumerate() {
        if subject_weights.is_some_and(|sw| sw[i] <= 0.0) {
            continue;
        }
        for w in s.gap_windows() {
            let weight = match subject_weights {
                Some(sw) => sw[i],
                None if w.completed => 1.0,
                None => continue,
            };
            let pieces = s
                .gap_segments(&w, &[])
                .into_iter()
                .map(|g| {
                    let view = HistoryView::new(s, g.calendar_start);
                    let mut features = vec![0.0; feature_map.len()];
                    feature_map.eval_indexed(&view, g.covariate_index, w.k, &mut features);
                    FeaturePiece {
                        start: g.start,
                        features,
                    }
                })
                .collect();
            out.push(GapObservation {
                length: w.length,
                event: w.completed,
                weight,
                pieces,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefillHazardModel {
    feature_map: FeatureMap,
    baseline: PiecewiseConstantBaseline,
    gamma: Vec<f64>,
    log_likelihood: Option<f64>,
    iterations: usize,
    converged: bool,
}

impl RefillHazardModel {
    /// A model with given parameters, for known truths and imports.
    pub fn new(
        feature_map: FeatureMap,
        baseline: PiecewiseConstantBaseline,
        gamma: Vec<f64>,
    ) -> Result<Self, HazardError> {
        if gamma.len() != feature_map.len() {
            return Err(HazardError::DimensionMismatch {
                expected: feature_map.len(),
                found: gamma.len(),
            });
        }
        validate_sources(&feature_map)?;
        Ok(Self {
            feature_map,
            baseline,
            gamma,
            log_likelihood: None,
            iterations: 0,
            converged: true,
        })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn baseline(&self) -> &PiecewiseConstantBaseline {
        &self.baseline
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn log_likelihood(&self) -> Option<f64> {
        self.log_likelihood
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// `exp{γ' z}`.
    pub fn relative_rate(&self, z: &[f64]) -> f64 {
        dot(&self.gamma, z).exp()
    }

    pub fn hazard(&self, u: f64, z: &[f64]) -> f64 {
        self.baseline.rate(u) * self.relative_rate(z)
    }

    /// The same model with every baseline rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for r in &mut m.baseline.rates {
            *r *= factor;
        }
        m.log_likelihood = None;
        m
    }
}

fn validate_sources(feature_map: &FeatureMap) -> Result<(), HazardError> {
    for (n, s) in feature_map.names().iter().zip(feature_map.sources()) {
        if *s == FeatureSource::TreatmentBefore {
            // Always 0 after the treated sliver at the gap start; no information.
            return Err(HazardError::UnsupportedFeature(n.clone()));
        }
    }
    Ok(())
}

fn gap_view(s: &SubjectTrajectory, k: usize, u: f64) -> Result<HistoryView<'_>, HazardError> {
    let d = s.dispensations();
    if k == 0 || k > d.refill_count() + 1 || !(u >= 0.0) {
        return Err(DataError::OutOfDomain {
            time: u,
            lower: 0.0,
            upper: f64::INFINITY,
        }
        .into());
    }
    Ok(HistoryView::new(s, d.gap_start(k) + u))
}

/// `λ̂_k(u | H)` with features read at calendar time `V_{k-1} + w - ε + u`.
pub fn refill_hazard_at(
    m: &RefillHazardModel,
    k: usize,
    u: f64,
    s: &SubjectTrajectory,
) -> Result<f64, HazardError> {
    let view = gap_view(s, k, u)?;
    let mut z = vec![0.0; m.feature_map.len()];
    m.feature_map.eval(&view, k, &mut z);
    Ok(m.hazard(u, &z))
}

/// `∫_0^u λ̂_k(v | H) dv`.
pub fn cumulative_refill_hazard(
    m: &RefillHazardModel,
    k: usize,
    u: f64,
    s: &SubjectTrajectory,
) -> Result<f64, HazardError> {
    let view = gap_view(s, k, u)?;
    let start = view.cutoff() - u;
    let window = crate::data_model::GapWindow {
        k,
        start,
        length: u,
        completed: false,
    };
    let mut z = vec![0.0; m.feature_map.len()];
    let mut total = 0.0;
    for g in s.gap_segments(&window, m.baseline.cuts()) {
        let view = HistoryView::new(s, g.calendar_start);
        m.feature_map.eval_indexed(&view, g.covariate_index, k, &mut z);
        total += m.baseline.rates()[g.piece] * m.relative_rate(&z) * g.length();
    }
    Ok(total)
}

fn quantile_cuts(events: &mut [f64], pieces: usize) -> Vec<f64> {
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = events.len();
    let mut cuts: Vec<f64> = Vec::new();
    for j in 1..pieces {
        let h = (n - 1) as f64 * j as f64 / pieces as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let q = events[lo] + (h - lo as f64) * (events[hi] - events[lo]);
        if q > cuts.last().copied().unwrap_or(0.0) {
            cuts.push(q);
        }
    }
    cuts
}

struct Segment {
    weight_len: f64,
    piece: usize,
    z: usize,
}

struct Event {
    weight: f64,
    piece: usize,
    z: usize,
}

/// Maximum-likelihood fit of `(log λ_0 pieces, γ)` by Newton's method with
/// step halving.
pub fn fit_refill_hazard(
    observations: &[GapObservation],
    feature_map: FeatureMap,
    cfg: &RefillFitConfig,
) -> Result<RefillHazardModel, HazardError> {
    validate_sources(&feature_map)?;
    let nf = feature_map.len();
    let mut event_lengths: Vec<f64> = observations
        .iter()
        .filter(|o| o.event)
        .map(|o| o.length)
        .collect();
    if event_lengths.is_empty() {
        return Err(HazardError::NoEvents);
    }
    if event_lengths.iter().all(|&t| t <= cfg.degenerate_gap) {
        return Err(HazardError::DegenerateGaps {
            threshold: cfg.degenerate_gap,
        });
    }
    let cuts = match &cfg.cuts {
        BaselineCuts::Quantiles(p) => quantile_cuts(&mut event_lengths, (*p).max(1)),
        BaselineCuts::Fixed(c) => c.clone(),
    };
    let nj = cuts.len() + 1;
    PiecewiseConstantBaseline::new(cuts.clone(), vec![0.0; nj])?;

    // Flatten into segments of constant (piece, features).
    let mut zs: Vec<f64> = Vec::new();
    let mut zcount = 0usize;
    let mut segments = Vec::new();
    let mut events = Vec::new();
    for o in observations {
        if o.weight == 0.0 || o.pieces.is_empty() {
            continue;
        }
        for (pi, p) in o.pieces.iter().enumerate() {
            if p.features.len() != nf {
                return Err(HazardError::DimensionMismatch {
                    expected: nf,
                    found: p.features.len(),
                });
            }
            zs.extend_from_slice(&p.features);
            let end = o.pieces.get(pi + 1).map_or(o.length, |q| q.start);
            let mut a = p.start;
            let mut piece = cuts.partition_point(|&c| c <= a);
            while a < end {
                let b = cuts.get(piece).copied().unwrap_or(f64::INFINITY).min(end);
                segments.push(Segment {
                    weight_len: o.weight * (b - a),
                    piece,
                    z: zcount,
                });
                a = b;
                piece += 1;
            }
            zcount += 1;
        }
        if o.event {
            // The hazard at the jump is its left limit.
            events.push(Event {
                weight: o.weight,
                piece: cuts.partition_point(|&c| c < o.length),
                z: zcount - 1,
            });
        }
    }
    let z_of = |i: usize| -> &[f64] { &zs[i * nf..(i + 1) * nf] };

    // Exposure-weighted feature variance.
    for f in 0..nf {
        let (mut sw, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for g in &segments {
            let x = z_of(g.z)[f];
            sw += g.weight_len;
            s1 += g.weight_len * x;
            s2 += g.weight_len * x * x;
        }
        let mean = s1 / sw;
        let var = (s2 / sw - mean * mean).max(0.0);
        if !(var > 1e-12 * mean.mul_add(mean, 1.0)) {
            return Err(HazardError::DegenerateFeature(feature_map.names()[f].clone()));
        }
    }

    let mut ev_piece = vec![0.0; nj];
    let mut ev_z = vec![0.0; nf];
    let mut exposure = vec![0.0; nj];
    for e in &events {
        ev_piece[e.piece] += e.weight;
        for (a, x) in ev_z.iter_mut().zip(z_of(e.z)) {
            *a += e.weight * x;
        }
    }
    for g in &segments {
        exposure[g.piece] += g.weight_len;
    }
    for j in 0..nj {
        if !(ev_piece[j] > 0.0) {
            return Err(HazardError::EmptyPiece { piece: j });
        }
    }

    let np = nj + nf;
    let mut theta: Vec<f64> = (0..nj).map(|j| (ev_piece[j] / exposure[j]).ln()).collect();
    theta.extend(std::iter::repeat_n(0.0, nf));

    let eval = |theta: &[f64], derivs: bool| -> (f64, DVector<f64>, DMatrix<f64>) {
        let (alpha, gamma) = theta.split_at(nj);
        let mut ll: f64 = (0..nj).map(|j| ev_piece[j] * alpha[j]).sum::<f64>() + dot(gamma, &ev_z);
        let mut grad = DVector::zeros(if derivs { np } else { 0 });
        let mut hess = DMatrix::zeros(if derivs { np } else { 0 }, if derivs { np } else { 0 });
        if derivs {
            for j in 0..nj {
                grad[j] = ev_piece[j];
            }
            for f in 0..nf {
                grad[nj + f] = ev_z[f];
            }
        }
        let mut cache_z = usize::MAX;
        let mut rel = 0.0;
        for g in &segments {
            if g.z != cache_z {
                rel = dot(gamma, z_of(g.z)).exp();
                cache_z = g.z;
            }
            let e = g.weight_len * alpha[g.piece].exp() * rel;
            ll -= e;
            if derivs {
                let z = z_of(g.z);
                let j = g.piece;
                grad[j] -= e;
                hess[(j, j)] -= e;
                for a in 0..nf {
                    let ea = e * z[a];
                    grad[nj + a] -= ea;
                    hess[(j, nj + a)] -= ea;
                    for b in 0..=a {
                        hess[(nj + a, nj + b)] -= ea * z[b];
                    }
                }
            }
        }
        if derivs {
            for a in 0..nf {
                for b in 0..a {
                    hess[(nj + b, nj + a)] = hess[(nj + a, nj + b)];
                }
                for j in 0..nj {
                    hess[(nj + a, j)] = hess[(j, nj + a)];
                }
            }
        }
        (ll, grad, hess)
    };

    let build = |theta: &[f64], ll: f64, iterations: usize, converged: bool| RefillHazardModel {
        feature_map: feature_map.clone(),
        baseline: PiecewiseConstantBaseline {
            cuts: cuts.clone(),
            rates: theta[..nj].iter().map(|a| a.exp()).collect(),
        },
        gamma: theta[nj..].to_vec(),
        log_likelihood: Some(ll),
        iterations,
        converged,
    };

    let (mut ll, mut grad, mut hess) = eval(&theta, true);
    for iter in 1..=cfg.max_iterations {
        let Some(step) = newton_step(&hess, &grad) else {
            return Err(HazardError::RefillNotConverged {
                iterations: iter,
                last: Box::new(build(&theta, ll, iter, false)),
            });
        };
        let mut scale = 1.0;
        let mut candidate: Vec<f64>;
        let mut cand_ll;
        let mut halvings = 0;
        loop {
            candidate = theta.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            cand_ll = eval(&candidate, false).0;
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                break;
            }
            halvings += 1;
            if halvings > 30 {
                break;
            }
            scale *= 0.5;
        }
        let max_step = step.iter().fold(0.0f64, |m, s| m.max((scale * s).abs()));
        theta = candidate;
        let (l2, g2, h2) = eval(&theta, true);
        ll = l2;
        grad = g2;
        hess = h2;
        if max_step < cfg.step_tolerance {
            return Ok(build(&theta, ll, iter, true));
        }
    }
    Err(HazardError::RefillNotConverged {
        iterations: cfg.max_iterations,
        last: Box::new(build(&theta, ll, cfg.max_iterations, false)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only() -> RefillFitConfig {
        RefillFitConfig {
            cuts: BaselineCuts::Fixed(vec![]),
            ..Default::default()
        }
    }

    #[test]
    fn intercept_only_fit_is_events_over_exposure() {
        let obs: Vec<_> = [2.0, 2.0, 4.0]
            .iter()
            .map(|&t| GapObservation::constant(t, true, vec![]))
            .collect();
        let m = fit_refill_hazard(&obs, FeatureMap::empty(), &intercept_only()).unwrap();
        assert!((m.baseline().rates()[0] - 3.0 / 8.0).abs() < 1e-14);
        let ll = 3.0 * (3.0f64 / 8.0).ln() - 3.0;
        assert!((m.log_likelihood().unwrap() - ll).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_is_rejected_by_name() {
        let obs: Vec<_> = [2.0, 3.0, 4.0]
            .iter()
            .map(|&t| GapObservation::constant(t, true, vec![0.0]))
            .collect();
        let fm = FeatureMap::new(vec!["z".into()], vec![FeatureSource::Covariate(0)]);
        let err = fit_refill_hazard(&obs, fm, &intercept_only()).unwrap_err();
        assert!(matches!(err, HazardError::DegenerateFeature(n) if n == "z"));
    }

    #[test]
    fn epsilon_gaps_are_degenerate() {
        let obs: Vec<_> = (0..5)
            .map(|_| GapObservation::constant(1e-6, true, vec![]))
            .collect();
        let err = fit_refill_hazard(&obs, FeatureMap::empty(), &intercept_only()).unwrap_err();
        assert!(matches!(err, HazardError::DegenerateGaps { .. }));
    }

    #[test]
    fn censored_records_add_exposure_only() {
        let mut obs: Vec<_> = [2.0, 2.0, 4.0]
            .iter()
            .map(|&t| GapObservation::constant(t, true, vec![]))
            .collect();
        obs.push(GapObservation {
            weight: 2.0,
            ..GapObservation::constant(1.0, false, vec![])
        });
        let m = fit_refill_hazard(&obs, FeatureMap::empty(), &intercept_only()).unwrap();
        assert!((m.baseline().rates()[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn binary_feature_matches_two_sample_closed_form() {
        // Exponential MLE per group: rate0 = 2/5, rate1 = 3/4.
        let mut obs = Vec::new();
        for t in [2.0, 3.0] {
            obs.push(GapObservation::constant(t, true, vec![0.0]));
        }
        for t in [1.0, 1.0, 2.0] {
            obs.push(GapObservation::constant(t, true, vec![1.0]));
        }
        let fm = FeatureMap::new(vec!["z".into()], vec![FeatureSource::Covariate(0)]);
        let m = fit_refill_hazard(&obs, fm, &intercept_only()).unwrap();
        assert!((m.baseline().rates()[0] - 0.4).abs() < 1e-12);
        assert!((m.gamma()[0] - (0.75f64 / 0.4).ln()).abs() < 1e-12);
        assert!(m.converged());
    }

    #[test]
    fn piecewise_baseline_matches_per_piece_ratios() {
        // Cut at 1: piece 0 sees 3 gaps for 1 day each plus one event; piece 1 the rest.
        let obs: Vec<_> = [0.5, 2.0, 3.0]
            .iter()
            .map(|&t| GapObservation::constant(t, true, vec![]))
            .collect();
        let cfg = RefillFitConfig {
            cuts: BaselineCuts::Fixed(vec![1.0]),
            ..Default::default()
        };
        let m = fit_refill_hazard(&obs, FeatureMap::empty(), &cfg).unwrap();
        assert!((m.baseline().rates()[0] - 1.0 / 2.5).abs() < 1e-12);
        assert!((m.baseline().rates()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_cumulative_integrates_rates() {
        let b = PiecewiseConstantBaseline::new(vec![1.0, 3.0], vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(b.piece(0.0), 0);
        assert_eq!(b.piece(1.0), 1);
        assert!((b.cumulative(4.0) - (0.5 + 2.0 + 2.0)).abs() < 1e-15);
        assert!((b.cumulative(0.5) - 0.25).abs() < 1e-15);
        assert!(PiecewiseConstantBaseline::new(vec![1.0, 1.0], vec![1.0; 3]).is_err());
    }

    #[test]
    fn quantile_cuts_are_increasing() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = quantile_cuts(&mut v, 5);
        assert_eq!(c.len(), 4);
        assert!((c[0] - 20.8).abs() < 1e-12);
    }
}
