//! Refill counting processes, their estimated martingales and stochastic
//! integrals of predictable step integrands against them.
//!
//! For gap `k` of a subject, `N_k(u) = 1{u >= T_k}` and `Y_k(u) = 1{u <= T_k}`
//! on the gap clock, and `dM̂_k = dN_k - Y_k λ̂_k du`. The compensator is stored
//! per segment of constant hazard so every integral is exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Cohort, GapTimeSet, GapWindow, HistoryView, SubjectTrajectory};
use crate::hazard_models::{HazardError, RefillHazardModel};

/// Correction `{1 - Δ∫λ du}` for discrete hazard jumps. Every implemented
/// hazard is absolutely continuous, so the jump is zero and the factor is 1.
pub const JUMP_FACTOR: f64 = 1.0;

#[derive(Debug, Clone, Error)]
pub enum MartingaleError {
    #[error("gap clock {0} is negative")]
    NegativeTime(f64),
    #[error("refill {k} does not exist (K = {count})")]
    NoSuchGap { k: usize, count: usize },
    #[error("integrand is not finite in gap {k} of subject {subject} at gap time {u}")]
    NonFinite { subject: String, k: usize, u: f64 },
    #[error("integrand has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Hazard(#[from] HazardError),
}

/// `(N_k(u), Y_k(u))`.
pub fn counting_at_risk(gaps: &GapTimeSet, k: usize, u: f64) -> Result<(u8, u8), MartingaleError> {
    if !(u >= 0.0) {
        return Err(MartingaleError::NegativeTime(u));
    }
    let t = gaps.get(k).ok_or(MartingaleError::NoSuchGap {
        k,
        count: gaps.len(),
    })?;
    Ok((u8::from(u >= t), u8::from(u <= t)))
}

/// Gap-clock interval `[start, end)` with constant history and hazard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensatorSegment {
    pub start: f64,
    pub end: f64,
    pub calendar_start: f64,
    pub covariate_index: usize,
    pub treated: bool,
    /// `λ̂` on the segment.
    pub rate: f64,
    /// `∫ λ̂ Y du` over the segment.
    pub mass: f64,
}

/// Martingale of one gap window. Completed gaps end in a unit jump; the
/// terminal period after the last coverage window has no jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapIncrement {
    pub k: usize,
    pub start: f64,
    pub length: f64,
    pub jump: bool,
    pub segments: Vec<CompensatorSegment>,
}

impl GapIncrement {
    pub fn window(&self) -> GapWindow {
        GapWindow {
            k: self.k,
            start: self.start,
            length: self.length,
            completed: self.jump,
        }
    }

    /// `M̂_k(∞)`.
    pub fn total(&self) -> f64 {
        let mass: f64 = self.segments.iter().map(|s| s.mass).sum();
        f64::from(u8::from(self.jump)) - mass
    }

    pub fn compensator(&self) -> f64 {
        self.segments.iter().map(|s| s.mass).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleIncrements {
    pub gaps: Vec<GapIncrement>,
}

impl MartingaleIncrements {
    /// `Σ_k M̂_k(∞)`.
    pub fn total(&self) -> f64 {
        self.gaps.iter().map(GapIncrement::total).sum()
    }

    /// The same increments with segments also split at the gap-clock points
    /// `breaks`.
    pub fn refined(&self, breaks: &[f64]) -> Self {
        let gaps = self
            .gaps
            .iter()
            .map(|g| {
                let mut segments = Vec::with_capacity(g.segments.len());
                for s in &g.segments {
                    let mut start = s.start;
                    let mut inner: Vec<f64> =
                        breaks.iter().copied().filter(|&b| b > s.start && b < s.end).collect();
                    inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    inner.push(s.end);
                    for end in inner {
                        segments.push(CompensatorSegment {
                            start,
                            end,
                            calendar_start: g.start + start,
                            mass: s.rate * (end - start),
                            ..*s
                        });
                        start = end;
                    }
                }
                GapIncrement {
                    segments,
                    ..g.clone()
                }
            })
            .collect();
        Self { gaps }
    }
}

/// Estimated martingales of every gap window of `s`, including the terminal one.
pub fn martingale_increments(
    s: &SubjectTrajectory,
    m: &RefillHazardModel,
) -> Result<MartingaleIncrements, MartingaleError> {
    let fm = m.feature_map();
    let mut z = vec![0.0; fm.len()];
    let gaps = s
        .gap_windows()
        .into_iter()
        .map(|w| {
            let segments = s
                .gap_segments(&w, m.baseline().cuts())
                .into_iter()
                .map(|g| {
                    let view = HistoryView::new(s, g.calendar_start);
                    fm.eval_indexed(&view, g.covariate_index, w.k, &mut z);
                    let rate = m.baseline().rates()[g.piece] * m.relative_rate(&z);
                    CompensatorSegment {
                        start: g.start,
                        end: g.end,
                        calendar_start: g.calendar_start,
                        covariate_index: g.covariate_index,
                        treated: g.treated,
                        rate,
                        mass: rate * g.length(),
                    }
                })
                .collect();
            GapIncrement {
                k: w.k,
                start: w.start,
                length: w.length,
                jump: w.completed,
                segments,
            }
        })
        .collect();
    Ok(MartingaleIncrements { gaps })
}

/// Where an integrand is evaluated: one compensator segment of one gap.
#[derive(Debug, Clone, Copy)]
pub struct SegmentContext<'a> {
    /// History up to the segment's calendar start.
    pub view: HistoryView<'a>,
    pub gap: &'a GapIncrement,
    pub segment: &'a CompensatorSegment,
}

/// Coefficients `(a, b, c)` of `f(u) = a + b u + c u²` on the gap clock.
pub type Quadratic = [f64; 3];

/// A predictable integrand, polynomial of degree at most 2 in the gap clock
/// on each segment.
///
/// Coefficients may only use the history in `ctx.view`; its accessors refuse
/// to look past the segment start. The value at a jump `T_k` is the left limit
/// of the last segment's polynomial.
pub trait PredictableIntegrand: Sync {
    fn dim(&self) -> usize;

    fn on_segment(&self, ctx: &SegmentContext, out: &mut [Quadratic]);
}

/// A constant integrand.
#[derive(Debug, Clone)]
pub struct Constant(pub Vec<f64>);

impl PredictableIntegrand for Constant {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn on_segment(&self, _: &SegmentContext, out: &mut [Quadratic]) {
        for (o, &v) in out.iter_mut().zip(&self.0) {
            *o = [v, 0.0, 0.0];
        }
    }
}

/// `∫_s^e (a + b u + c u²) du`.
pub fn integrate_quadratic(q: &Quadratic, s: f64, e: f64) -> f64 {
    q[0] * (e - s) + q[1] * (e * e - s * s) / 2.0 + q[2] * (e * e * e - s * s * s) / 3.0
}

/// Value of a quadratic at `u`.
pub fn eval_quadratic(q: &Quadratic, u: f64) -> f64 {
    q[0] + u * (q[1] + u * q[2])
}

/// `Σ_k ∫ f dM̂_k` for one subject.
pub fn stochastic_integral(
    f: &dyn PredictableIntegrand,
    s: &SubjectTrajectory,
    inc: &MartingaleIncrements,
) -> Result<Vec<f64>, MartingaleError> {
    let d = f.dim();
    let mut total = vec![0.0; d];
    let mut q = vec![[0.0; 3]; d];
    for gap in &inc.gaps {
        for (i, seg) in gap.segments.iter().enumerate() {
            let ctx = SegmentContext {
                view: HistoryView::new(s, seg.calendar_start),
                gap,
                segment: seg,
            };
            f.on_segment(&ctx, &mut q);
            let last = gap.jump && i + 1 == gap.segments.len();
            for (t, c) in total.iter_mut().zip(&q) {
                let mut v = -seg.rate * integrate_quadratic(c, seg.start, seg.end);
                if last {
                    v += eval_quadratic(c, gap.length);
                }
                if !v.is_finite() {
                    return Err(MartingaleError::NonFinite {
                        subject: s.id().to_string(),
                        k: gap.k,
                        u: seg.start,
                    });
                }
                *t += v;
            }
        }
    }
    Ok(total)
}

/// Mean of the subject totals `Σ_k M̂_k(∞)` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

impl MeanReport {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Self {
            n,
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// `|mean| <= z SE`.
    pub fn within(&self, z: f64) -> bool {
        self.mean.abs() <= z * self.se
    }
}

/// Subject-level martingale totals over a cohort, in subject order.
pub fn cohort_martingale_totals(
    cohort: &Cohort,
    m: &RefillHazardModel,
) -> Result<Vec<f64>, MartingaleError> {
    cohort
        .subjects()
        .par_iter()
        .map(|s| martingale_increments(s, m).map(|inc| inc.total()))
        .collect()
}

/// Compensator-based and empirical estimates of `Cov(∫f dM, ∫g dM)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariationReport {
    /// `(1/n) Σ_i Σ_k ∫ f g Y λ̂ du`, with the jump factor applied.
    pub compensator: f64,
    /// Sample covariance of the subject-level integrals.
    pub empirical: f64,
    /// `compensator / empirical`; absent when the empirical value is zero.
    pub ratio: Option<f64>,
}

/// Compares the predictable covariation of two scalar integrals with their
/// empirical covariance across subjects.
pub fn covariation_diagnostic(
    f: &dyn PredictableIntegrand,
    g: &dyn PredictableIntegrand,
    cohort: &Cohort,
    m: &RefillHazardModel,
) -> Result<CovariationReport, MartingaleError> {
    for d in [f.dim(), g.dim()] {
        if d != 1 {
            return Err(MartingaleError::DimensionMismatch {
                expected: 1,
                found: d,
            });
        }
    }
    let rows: Vec<(f64, f64, f64)> = cohort
        .subjects()
        .par_iter()
        .map(|s| {
            let inc = martingale_increments(s, m)?;
            let int_f = stochastic_integral(f, s, &inc)?[0];
            let int_g = stochastic_integral(g, s, &inc)?[0];
            let mut comp = 0.0;
            let (mut qf, mut qg) = ([[0.0; 3]], [[0.0; 3]]);
            for gap in &inc.gaps {
                for seg in &gap.segments {
                    let ctx = SegmentContext {
                        view: HistoryView::new(s, seg.calendar_start),
                        gap,
                        segment: seg,
                    };
                    f.on_segment(&ctx, &mut qf);
                    g.on_segment(&ctx, &mut qg);
                    comp += seg.rate * JUMP_FACTOR * integrate_product(&qf[0], &qg[0], seg.start, seg.end);
                }
            }
            Ok((comp, int_f, int_g))
        })
        .collect::<Result<_, MartingaleError>>()?;
    let n = rows.len() as f64;
    let compensator = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let mf = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mg = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let empirical = rows.iter().map(|r| (r.1 - mf) * (r.2 - mg)).sum::<f64>() / (n - 1.0);
    Ok(CovariationReport {
        compensator,
        empirical,
        ratio: (empirical != 0.0).then(|| compensator / empirical),
    })
}

/// `∫_s^e p(u) q(u) du` for two quadratics.
fn integrate_product(p: &Quadratic, q: &Quadratic, s: f64, e: f64) -> f64 {
    let c = [
        p[0] * q[0],
        p[0] * q[1] + p[1] * q[0],
        p[0] * q[2] + p[1] * q[1] + p[2] * q[0],
        p[1] * q[2] + p[2] * q[1],
        p[2] * q[2],
    ];
    let mut total = 0.0;
    let (mut se, mut ee) = (s, e);
    for (j, cj) in c.iter().enumerate() {
        total += cj * (ee - se) / (j as f64 + 1.0);
        se *= s;
        ee *= e;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{normalize_dispensations, CovariateProcess, Schema};
    use crate::hazard_models::{FeatureMap, PiecewiseConstantBaseline};

    fn subject() -> SubjectTrajectory {
        let cov = CovariateProcess::new(vec![0.0, 35.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let d = normalize_dispensations(&[0.0, 40.0, 75.0], 30.0).unwrap();
        SubjectTrajectory::new("a", 120.0, true, vec![], cov, d).unwrap()
    }

    fn model(rate: f64, gamma: f64) -> RefillHazardModel {
        let schema = Schema::new(vec!["l1".into()], vec![]);
        let fm = FeatureMap::from_names(&schema, &["l1".to_string()]).unwrap();
        RefillHazardModel::new(fm, PiecewiseConstantBaseline::constant(rate).unwrap(), vec![gamma])
            .unwrap()
    }

    #[test]
    fn counting_and_at_risk_fire_together_at_the_jump() {
        let gaps = GapTimeSet::new(vec![10.0]);
        assert_eq!(counting_at_risk(&gaps, 1, 5.0).unwrap(), (0, 1));
        assert_eq!(counting_at_risk(&gaps, 1, 10.0).unwrap(), (1, 1));
        assert_eq!(counting_at_risk(&gaps, 1, 11.0).unwrap(), (1, 0));
        assert!(counting_at_risk(&gaps, 2, 1.0).is_err());
    }

    #[test]
    fn constant_hazard_total_is_one_minus_rate_times_gap() {
        let s = subject();
        let inc = martingale_increments(&s, &model(0.1, 0.0)).unwrap();
        let g1 = &inc.gaps[0];
        assert!((g1.total() - (1.0 - 0.1 * g1.length)).abs() < 1e-14);
        let zero = martingale_increments(&s, &model(0.0, 0.0)).unwrap();
        for g in &zero.gaps[..2] {
            assert_eq!(g.total(), 1.0);
        }
        // Terminal period after the last coverage window carries no jump.
        assert!(!inc.gaps[2].jump);
    }

    #[test]
    fn constant_integrands_reduce_to_martingale_mass() {
        let s = subject();
        let inc = martingale_increments(&s, &model(0.1, 0.7)).unwrap();
        let one = stochastic_integral(&Constant(vec![1.0]), &s, &inc).unwrap();
        assert!((one[0] - inc.total()).abs() < 1e-14);
        let zero = stochastic_integral(&Constant(vec![0.0]), &s, &inc).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    /// Integrand linear in the gap clock with slope read from `L`.
    struct Ramp;

    impl PredictableIntegrand for Ramp {
        fn dim(&self) -> usize {
            1
        }

        fn on_segment(&self, ctx: &SegmentContext, out: &mut [Quadratic]) {
            let l = ctx.view.covariates()[0];
            out[0] = [1.0 + l, 0.5 - l, 0.01 * f64::from(u8::from(ctx.segment.treated))];
        }
    }

    #[test]
    fn integrals_match_a_fine_riemann_sum() {
        let s = subject();
        let m = model(0.05, 0.4);
        let inc = martingale_increments(&s, &m).unwrap();
        let exact = stochastic_integral(&Ramp, &s, &inc).unwrap()[0];
        // Midpoint rule between the path's own break points.
        let mut oracle = 0.0;
        for w in s.gap_windows() {
            let mut cuts = vec![0.0, 1e-6, w.length];
            cuts.extend(
                s.covariates()
                    .change_times()
                    .iter()
                    .map(|t| t - w.start)
                    .filter(|&u| u > 0.0 && u < w.length),
            );
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in cuts.windows(2) {
                let steps = 20_000;
                let h = (pair[1] - pair[0]) / steps as f64;
                for j in 0..steps {
                    let u = pair[0] + (j as f64 + 0.5) * h;
                    let t = w.start + u;
                    let l = s.covariates().covariate_at(t).unwrap()[0];
                    let treated = s.path().dispensations.is_treated(t);
                    let f = 1.0 + l + (0.5 - l) * u + 0.01 * f64::from(u8::from(treated)) * u * u;
                    oracle -= f * 0.05 * (0.4 * l).exp() * h;
                }
            }
            if w.completed {
                let l = s.covariates().covariate_at(w.end() - 1e-9).unwrap()[0];
                oracle += 1.0 + l + (0.5 - l) * w.length;
            }
        }
        assert!((exact - oracle).abs() < 1e-9, "{exact} vs {oracle}");
    }

    #[test]
    fn refinement_leaves_integrals_unchanged() {
        let s = subject();
        let inc = martingale_increments(&s, &model(0.05, 0.4)).unwrap();
        let a = stochastic_integral(&Ramp, &s, &inc).unwrap()[0];
        let b = stochastic_integral(&Ramp, &s, &inc.refined(&[0.3, 2.0, 7.5])).unwrap()[0];
        assert!((a - b).abs() < 1e-12);
    }

    struct Peek;

    impl PredictableIntegrand for Peek {
        fn dim(&self) -> usize {
            1
        }

        fn on_segment(&self, ctx: &SegmentContext, out: &mut [Quadratic]) {
            // Index 1 changes at t = 35, inside the first gap.
            out[0] = [ctx.view.covariates_by_index(1)[0], 0.0, 0.0];
        }
    }

    #[test]
    #[should_panic(expected = "history leak")]
    fn integrands_cannot_read_the_future() {
        let s = subject();
        let inc = martingale_increments(&s, &model(0.05, 0.0)).unwrap();
        let _ = stochastic_integral(&Peek, &s, &inc);
    }

    #[test]
    fn quadratic_products_integrate_exactly() {
        let p = [1.0, -2.0, 0.5];
        let q = [0.3, 0.1, -1.0];
        let (s, e) = (0.5, 2.0);
        let steps = 100_000;
        let h = (e - s) / steps as f64;
        let riemann: f64 = (0..steps)
            .map(|j| {
                let u = s + (j as f64 + 0.5) * h;
                eval_quadratic(&p, u) * eval_quadratic(&q, u) * h
            })
            .sum();
        assert!((integrate_product(&p, &q, s, e) - riemann).abs() < 1e-8);
    }

    #[test]
    fn zero_integrand_has_zero_covariation() {
        let cohort = Cohort::new(Schema::new(vec!["l1".into()], vec![]), vec![subject(), subject()])
            .unwrap();
        let r = covariation_diagnostic(&Constant(vec![1.0]), &Constant(vec![0.0]), &cohort, &model(0.05, 0.0))
            .unwrap();
        assert_eq!(r.compensator, 0.0);
        assert_eq!(r.ratio, None);
    }
}
