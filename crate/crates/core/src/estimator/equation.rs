//! The weighted estimating equation and its nuisance regressions.
//!
//! Every risk point `(i, k, u)` carries the feature vector
//! `z = [φ; accrued]` with `φ = [1, x0, L_u, k, u]` and
//! `accrued = U_i(ψ; gap start) + u`, the mimicking time accrued when the gap
//! clock started plus the elapsed gap clock. Both the outcome regression and
//! the index `c = Γ z` are linear in `z`, so each gap reduces to the moments
//! `∫ φ φ' du`, `∫ φ φ' dM̂` and `φ(T_k)`. Only the accrued row depends on `ψ`,
//! through the scalar gap-start value, so re-evaluating at a new `ψ` costs
//! one pass over each path plus `O(dim φ)` per gap.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EstimatorError, EstimatorConfig, IndexChoice, ModelSpec, Nuisances};
use crate::counterfactual::{
    path_mimicking_time, CounterfactualError, EffectModifierMap, PsiVector, MAX_EXPONENT,
};
use crate::data_model::{Cohort, HistoryView, SubjectTrajectory};
use crate::hazard_models::REFILL_INDEX;
use crate::linalg::solve_psd;
use crate::martingale::{
    martingale_increments, stochastic_integral, MartingaleIncrements, PredictableIntegrand,
    Quadratic, SegmentContext,
};

/// Name of the gap-clock feature.
pub const GAP_CLOCK: &str = "u";
/// Name of the accrued mimicking-time feature.
pub const ACCRUED: &str = "accrued";

/// One coordinate of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum OutcomeFeature {
    Intercept,
    Baseline(usize),
    Covariate(usize),
    RefillIndex,
    GapClock,
    Accrued,
}

/// Positions inside `z`.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    nb: usize,
    nl: usize,
    /// `dim φ`.
    d: usize,
    k_pos: usize,
    u_pos: usize,
    /// Coordinates of `z` used by the regressions, ascending.
    mask: Vec<usize>,
    /// `φ` positions of the effect modifiers.
    g_pos: Vec<usize>,
    centers: Vec<f64>,
}

impl Layout {
    fn new(cohort: &Cohort, spec: &ModelSpec, g: &EffectModifierMap) -> Result<Self, EstimatorError> {
        let schema = cohort.schema();
        let nb = schema.baseline.len();
        let nl = schema.covariates.len();
        let d = nb + nl + 3;
        let k_pos = 1 + nb + nl;
        let u_pos = k_pos + 1;
        let mut mask = vec![0];
        for name in &spec.outcome_features {
            let pos = if name == REFILL_INDEX {
                k_pos
            } else if name == GAP_CLOCK {
                u_pos
            } else if name == ACCRUED {
                d
            } else if let Some(i) = schema.baseline_index(name) {
                1 + i
            } else if let Some(i) = schema.covariate_index(name) {
                1 + nb + i
            } else {
                return Err(EstimatorError::UnknownFeature(name.clone()));
            };
            if !mask.contains(&pos) {
                mask.push(pos);
            }
        }
        mask.sort_unstable();
        Ok(Self {
            nb,
            nl,
            d,
            k_pos,
            u_pos,
            mask,
            g_pos: g.columns().iter().map(|c| 1 + nb + c).collect(),
            centers: g.centers().to_vec(),
        })
    }

    fn zdim(&self) -> usize {
        self.d + 1
    }

    fn feature(&self, pos: usize) -> OutcomeFeature {
        match pos {
            0 => OutcomeFeature::Intercept,
            p if p <= self.nb => OutcomeFeature::Baseline(p - 1),
            p if p <= self.nb + self.nl => OutcomeFeature::Covariate(p - 1 - self.nb),
            p if p == self.k_pos => OutcomeFeature::RefillIndex,
            p if p == self.u_pos => OutcomeFeature::GapClock,
            _ => OutcomeFeature::Accrued,
        }
    }

    /// `φ` at gap-clock zero of a segment: the `u` slot is left at 0.
    fn phi0(&self, baseline: &[f64], l: &[f64], k: usize, out: &mut [f64]) {
        out[0] = 1.0;
        out[1..=self.nb].copy_from_slice(baseline);
        out[1 + self.nb..1 + self.nb + self.nl].copy_from_slice(l);
        out[self.k_pos] = k as f64;
        out[self.u_pos] = 0.0;
    }

    /// Rows of `Γ` for the simple index `(1, g(L_u))`, scaled.
    fn simple_index(&self, scale: f64) -> DMatrix<f64> {
        let p = 1 + self.g_pos.len();
        let mut m = DMatrix::zeros(p, self.zdim());
        m[(0, 0)] = scale;
        for (j, (&pos, &c)) in self.g_pos.iter().zip(&self.centers).enumerate() {
            m[(j + 1, pos)] = scale;
            m[(j + 1, 0)] = -scale * c;
        }
        m
    }
}

/// ψ-free moments of one gap window.
#[derive(Debug, Clone)]
struct GapMoments {
    length: f64,
    /// `∫ φ du` over the window, which is the first column of `∫ φ φ' du`.
    ell: Vec<f64>,
    /// `∫ φ dM̂`, the first column of `∫ φ φ' dM̂`.
    jm: Vec<f64>,
    /// `φ(T_k-)` for completed gaps.
    phi_jump: Option<Vec<f64>>,
}

/// Constant stretch of a path, for the one-pass mimicking-time walk.
#[derive(Debug, Clone)]
struct PathStretch {
    length: f64,
    /// `g(L)` on treated stretches; `None` when untreated.
    g: Option<Vec<f64>>,
    start: f64,
}

#[derive(Debug, Clone)]
struct SubjectMoments {
    weight: f64,
    stretches: Vec<PathStretch>,
    /// For each gap, the number of stretches before its start.
    gap_stretch: Vec<usize>,
    gaps: Vec<GapMoments>,
    ell_sum: Vec<f64>,
    jm_sum: Vec<f64>,
    risk_time: f64,
}

/// The estimating equation `P_n Σ_k ∫ c (U - Ê U) dM̂` for one cohort and one
/// set of nuisance models, ready to evaluate at any `ψ`.
#[derive(Debug, Clone)]
pub struct EstimatingEquation {
    layout: Layout,
    g: EffectModifierMap,
    n: usize,
    subjects: Vec<SubjectMoments>,
    /// `Σ ω ∫ φ φ' du`.
    sl: DMatrix<f64>,
    /// `Σ ω ∫ φ φ' dM̂`.
    sq: DMatrix<f64>,
    /// `Σ ω Σ_completed φ(T) φ(T)'`.
    sjump: DMatrix<f64>,
    index: IndexChoice,
    /// `Γ` frozen by [`EstimatingEquation::freeze_index`].
    frozen: Option<DMatrix<f64>>,
    simple_scale: f64,
    variance_floor: f64,
}

/// Outcome regression `Ê{U(ψ) | H̄_u, T_k >= u} = ξ' z` fitted at one `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRegressionModel {
    pub psi: PsiVector,
    pub features: Vec<OutcomeFeature>,
    pub coefficients: Vec<f64>,
    /// Pooled risk-time weighted residual variance, after flooring.
    pub residual_variance: f64,
    pub variance_floored: bool,
    effect_modifier: EffectModifierMap,
}

/// `c(H̄_u) = Γ z(u)`, one row per component of `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFunction {
    pub choice: IndexChoice,
    rows: Vec<Vec<f64>>,
    features: Vec<OutcomeFeature>,
}

/// Result of evaluating the equation at one `ψ`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ee: Vec<f64>,
    pub outcome: OutcomeRegressionModel,
    pub index: IndexFunction,
}

/// A risk point `(subject, k, u)` described by its features.
fn z_at(
    layout: &Layout,
    s: &SubjectTrajectory,
    k: usize,
    u: f64,
    psi: &PsiVector,
    g: &EffectModifierMap,
) -> Result<Vec<f64>, EstimatorError> {
    let d = s.dispensations();
    let count = d.refill_count();
    if k == 0 || k > count + 1 || !(u >= 0.0) {
        return Err(EstimatorError::InvalidRiskPoint { k, u });
    }
    let start = d.gap_start(k);
    let view = HistoryView::new(s, start + u);
    let mut z = vec![0.0; layout.zdim()];
    layout.phi0(s.baseline(), view.covariates(), k, &mut z[..layout.d]);
    z[layout.u_pos] = u;
    z[layout.d] = path_mimicking_time(s.path(), psi, g, 0.0, start)? + u;
    Ok(z)
}

/// `Ê{U(ψ) | H̄_u, T_k >= u}` at a risk point.
pub fn conditional_mean_u(
    psi: &PsiVector,
    orm: &OutcomeRegressionModel,
    s: &SubjectTrajectory,
    k: usize,
    u: f64,
) -> Result<f64, EstimatorError> {
    if *psi != orm.psi {
        return Err(EstimatorError::StaleRegression);
    }
    let z = orm.features_at(s, k, u)?;
    Ok(z.iter().zip(&orm.coefficients).map(|(a, b)| a * b).sum())
}

impl OutcomeRegressionModel {
    fn features_at(&self, s: &SubjectTrajectory, k: usize, u: f64) -> Result<Vec<f64>, EstimatorError> {
        let d = s.dispensations();
        if k == 0 || k > d.refill_count() + 1 || !(u >= 0.0) {
            return Err(EstimatorError::InvalidRiskPoint { k, u });
        }
        let start = d.gap_start(k);
        let view = HistoryView::new(s, start + u);
        let mut accrued = None;
        self.features
            .iter()
            .map(|f| {
                Ok(match *f {
                    OutcomeFeature::Intercept => 1.0,
                    OutcomeFeature::Baseline(i) => s.baseline()[i],
                    OutcomeFeature::Covariate(i) => view.covariates()[i],
                    OutcomeFeature::RefillIndex => k as f64,
                    OutcomeFeature::GapClock => u,
                    OutcomeFeature::Accrued => {
                        if accrued.is_none() {
                            accrued = Some(path_mimicking_time(
                                s.path(),
                                &self.psi,
                                &self.effect_modifier,
                                0.0,
                                start,
                            )?);
                        }
                        accrued.unwrap() + u
                    }
                })
            })
            .collect()
    }
}

impl IndexFunction {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// `Γ` restricted to its non-zero features.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn features(&self) -> &[OutcomeFeature] {
        &self.features
    }
}

/// `c^opt` (or the simple index) at a risk point.
pub fn c_opt(eval: &Evaluation, s: &SubjectTrajectory, k: usize, u: f64) -> Result<Vec<f64>, EstimatorError> {
    let orm = &eval.outcome;
    let probe = OutcomeRegressionModel {
        features: eval.index.features.clone(),
        ..orm.clone()
    };
    let z = probe.features_at(s, k, u)?;
    Ok(eval
        .index
        .rows
        .iter()
        .map(|r| r.iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect())
}

fn stretches(
    s: &SubjectTrajectory,
    g: &EffectModifierMap,
    horizon: f64,
) -> (Vec<PathStretch>, Vec<usize>) {
    let windows = s.gap_windows();
    let starts: Vec<f64> = windows.iter().map(|w| w.start).collect();
    let path = s.path();
    let pieces = path.pieces_with_breaks(horizon, &starts);
    let out: Vec<PathStretch> = pieces
        .iter()
        .map(|p| PathStretch {
            length: p.length(),
            g: p.treated.then(|| g.eval(path.covariates.value(p.covariate_index))),
            start: p.start,
        })
        .collect();
    let gap_stretch = starts
        .iter()
        .map(|&t| out.partition_point(|p| p.start < t))
        .collect();
    (out, gap_stretch)
}

/// Mimicking time and gradient at the end of the path and at each gap start.
struct PathValues {
    u: f64,
    grad: Vec<f64>,
    gap_u: Vec<f64>,
    gap_grad: Vec<f64>,
}

fn walk_path(m: &SubjectMoments, psi: &PsiVector, p: usize, want_grad: bool) -> Result<PathValues, CounterfactualError> {
    let n_gaps = m.gap_stretch.len();
    let mut out = PathValues {
        u: 0.0,
        grad: vec![0.0; p],
        gap_u: Vec::with_capacity(n_gaps),
        gap_grad: if want_grad { Vec::with_capacity(n_gaps * p) } else { Vec::new() },
    };
    let mut time = 0.0;
    let mut excess = 0.0;
    let mut next_gap = 0;
    for (i, st) in m.stretches.iter().enumerate() {
        while next_gap < n_gaps && m.gap_stretch[next_gap] == i {
            out.gap_u.push(time + excess);
            if want_grad {
                out.gap_grad.extend_from_slice(&out.grad);
            }
            next_gap += 1;
        }
        time += st.length;
        if let Some(gv) = &st.g {
            let eta = psi.psi1 + gv.iter().zip(&psi.psi2).map(|(a, b)| a * b).sum::<f64>();
            if !(eta.abs() <= MAX_EXPONENT) {
                return Err(CounterfactualError::Overflow {
                    exponent: eta,
                    start: st.start,
                    end: st.start + st.length,
                });
            }
            excess += st.length * eta.exp_m1();
            if want_grad {
                let w = st.length * eta.exp();
                out.grad[0] += w;
                for (d, x) in out.grad[1..].iter_mut().zip(gv) {
                    *d += w * x;
                }
            }
        }
    }
    while next_gap < n_gaps {
        out.gap_u.push(time + excess);
        if want_grad {
            out.gap_grad.extend_from_slice(&out.grad);
        }
        next_gap += 1;
    }
    out.u = time + excess;
    Ok(out)
}

/// Adds `a * x x'` to a symmetric matrix.
fn add_outer(m: &mut DMatrix<f64>, x: &[f64], a: f64) {
    for i in 0..x.len() {
        let xi = a * x[i];
        for j in 0..x.len() {
            m[(i, j)] += xi * x[j];
        }
    }
}

fn subject_moments(
    layout: &Layout,
    g: &EffectModifierMap,
    s: &SubjectTrajectory,
    inc: &MartingaleIncrements,
    weight: f64,
    sl: &mut DMatrix<f64>,
    sq: &mut DMatrix<f64>,
    sjump: &mut DMatrix<f64>,
) -> SubjectMoments {
    let d = layout.d;
    let u = layout.u_pos;
    let mut phi = vec![0.0; d];
    let mut gaps = Vec::with_capacity(inc.gaps.len());
    let mut ell_sum = vec![0.0; d];
    let mut jm_sum = vec![0.0; d];
    let mut risk_time = 0.0;
    // Segment-level ∫ φ φ' du is φ0 φ0' Δ1 + (φ0 e_u' + e_u φ0') Δ2 + e_u e_u' Δ3.
    for gap in &inc.gaps {
        let mut ell = vec![0.0; d];
        let mut jm = vec![0.0; d];
        for seg in &gap.segments {
            let view = HistoryView::new(s, seg.calendar_start);
            layout.phi0(s.baseline(), view.covariates_by_index(seg.covariate_index), gap.k, &mut phi);
            let (a, b) = (seg.start, seg.end);
            let d1 = b - a;
            let d2 = (b * b - a * a) / 2.0;
            let d3 = (b * b * b - a * a * a) / 3.0;
            for (w, r) in [(weight, &mut *sl), (-weight * seg.rate, &mut *sq)] {
                add_outer(r, &phi, w * d1);
                for i in 0..d {
                    r[(i, u)] += w * phi[i] * d2;
                    r[(u, i)] += w * phi[i] * d2;
                }
                r[(u, u)] += w * d3;
            }
            for i in 0..d {
                ell[i] += phi[i] * d1;
                jm[i] -= seg.rate * phi[i] * d1;
            }
            ell[u] += d2;
            jm[u] -= seg.rate * d2;
        }
        let phi_jump = gap.jump.then(|| {
            let mut p = phi.clone();
            p[u] = gap.length;
            p
        });
        if let Some(p) = &phi_jump {
            for i in 0..d {
                jm[i] += p[i];
            }
            add_outer(sq, p, weight);
            add_outer(sjump, p, weight);
        }
        for i in 0..d {
            ell_sum[i] += ell[i];
            jm_sum[i] += jm[i];
        }
        risk_time += gap.length;
        gaps.push(GapMoments {
            length: gap.length,
            ell,
            jm,
            phi_jump,
        });
    }
    let (stretches, gap_stretch) = stretches(s, g, s.followup_time());
    SubjectMoments {
        weight,
        stretches,
        gap_stretch,
        gaps,
        ell_sum,
        jm_sum,
        risk_time,
    }
}

/// Per-subject contributions at one `ψ`, reduced in subject order.
struct Accumulator {
    /// Last column of `N` without the static part.
    n_cross: Vec<f64>,
    n_corner: f64,
    r: Vec<f64>,
    u2t: f64,
    sa: Vec<f64>,
    b_cross: Vec<f64>,
    b_corner: f64,
    risk_time: f64,
    /// `Σ G (A ℓ)'`, `p × (d+1)` row-major.
    rhs_a: Vec<f64>,
    jump_cross: Vec<f64>,
    jump_corner: f64,
    /// `Σ G ∫ z' dM̂`, `p × (d+1)` row-major.
    rhs_m: Vec<f64>,
}

impl Accumulator {
    fn zeros(d: usize, p: usize) -> Self {
        Self {
            n_cross: vec![0.0; d],
            n_corner: 0.0,
            r: vec![0.0; d + 1],
            u2t: 0.0,
            sa: vec![0.0; d + 1],
            b_cross: vec![0.0; d],
            b_corner: 0.0,
            risk_time: 0.0,
            rhs_a: vec![0.0; p * (d + 1)],
            jump_cross: vec![0.0; d],
            jump_corner: 0.0,
            rhs_m: vec![0.0; p * (d + 1)],
        }
    }

    fn add(&mut self, o: &Self) {
        fn add(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        add(&mut self.n_cross, &o.n_cross);
        self.n_corner += o.n_corner;
        add(&mut self.r, &o.r);
        self.u2t += o.u2t;
        add(&mut self.sa, &o.sa);
        add(&mut self.b_cross, &o.b_cross);
        self.b_corner += o.b_corner;
        self.risk_time += o.risk_time;
        add(&mut self.rhs_a, &o.rhs_a);
        add(&mut self.jump_cross, &o.jump_cross);
        self.jump_corner += o.jump_corner;
        add(&mut self.rhs_m, &o.rhs_m);
    }
}

impl EstimatingEquation {
    pub fn new(
        cohort: &Cohort,
        spec: &ModelSpec,
        nuisances: &Nuisances,
        cfg: &EstimatorConfig,
    ) -> Result<Self, EstimatorError> {
        let g = spec.effect_modifier_map(cohort.schema())?;
        let layout = Layout::new(cohort, spec, &g)?;
        let d = layout.d;
        struct Part {
            m: SubjectMoments,
            sl: DMatrix<f64>,
            sq: DMatrix<f64>,
            sjump: DMatrix<f64>,
        }
        let parts: Vec<Option<Part>> = cohort
            .subjects()
            .par_iter()
            .zip(nuisances.weights.par_iter())
            .map(|(s, &w)| {
                if w == 0.0 {
                    return Ok(None);
                }
                let inc = martingale_increments(s, &nuisances.refill)?;
                let mut sl = DMatrix::zeros(d, d);
                let mut sq = DMatrix::zeros(d, d);
                let mut sjump = DMatrix::zeros(d, d);
                let m = subject_moments(&layout, &g, s, &inc, w, &mut sl, &mut sq, &mut sjump);
                Ok(Some(Part { m, sl, sq, sjump }))
            })
            .collect::<Result<_, EstimatorError>>()?;
        let mut sl = DMatrix::zeros(d, d);
        let mut sq = DMatrix::zeros(d, d);
        let mut sjump = DMatrix::zeros(d, d);
        let mut subjects = Vec::new();
        for p in parts.into_iter().flatten() {
            sl += &p.sl;
            sq += &p.sq;
            sjump += &p.sjump;
            subjects.push(p.m);
        }
        if subjects.is_empty() {
            return Err(EstimatorError::NoUncensored);
        }
        Ok(Self {
            layout,
            g,
            n: cohort.len(),
            subjects,
            sl,
            sq,
            sjump,
            index: cfg.index_choice,
            frozen: None,
            simple_scale: cfg.simple_index_scale,
            variance_floor: cfg.variance_floor,
        })
    }

    /// `dim ψ`.
    pub fn dim(&self) -> usize {
        1 + self.g.dim()
    }

    pub fn set_index(&mut self, choice: IndexChoice) {
        self.index = choice;
        self.frozen = None;
    }

    pub fn effect_modifier(&self) -> &EffectModifierMap {
        &self.g
    }

    fn accumulate(&self, psi: &PsiVector) -> Result<Accumulator, EstimatorError> {
        let d = self.layout.d;
        let p = self.dim();
        let u = self.layout.u_pos;
        let want_grad = self.index == IndexChoice::Optimal && self.frozen.is_none();
        let parts: Vec<Accumulator> = self
            .subjects
            .par_iter()
            .map(|m| {
                let pv = walk_path(m, psi, p, want_grad)?;
                let w = m.weight;
                let mut a = Accumulator::zeros(d, p);
                let uu = pv.u;
                a.u2t = w * uu * uu * m.risk_time;
                a.risk_time = w * m.risk_time;
                for i in 0..d {
                    a.r[i] = w * uu * m.ell_sum[i];
                    a.sa[i] = w * uu * m.jm_sum[i];
                }
                let mut r_last = 0.0;
                let mut sa_last = 0.0;
                for (gi, gap) in m.gaps.iter().enumerate() {
                    let base = pv.gap_u[gi];
                    // A_g maps φ to z; its last row is base e_0 + e_u.
                    for i in 0..d {
                        a.n_cross[i] += w * base * gap.ell[i];
                        a.b_cross[i] += w * base * gap.jm[i];
                    }
                    a.n_corner += w * (base * base * gap.ell[0] + 2.0 * base * gap.ell[u]);
                    a.b_corner += w * (base * base * gap.jm[0] + 2.0 * base * gap.jm[u]);
                    let acc_ell = base * gap.ell[0] + gap.ell[u];
                    r_last += acc_ell;
                    sa_last += base * gap.jm[0] + gap.jm[u];
                    if let Some(phi) = &gap.phi_jump {
                        let acc = base + gap.length;
                        // Static u-part of the corner is added below through sjump.
                        for i in 0..d {
                            a.jump_cross[i] += w * phi[i] * base;
                        }
                        a.jump_corner += w * (acc * acc - gap.length * gap.length);
                    }
                    if want_grad {
                        let acc_jm = base * gap.jm[0] + gap.jm[u];
                        for j in 0..p {
                            let gval = pv.grad[j] - pv.gap_grad[gi * p + j];
                            let row = &mut a.rhs_a[j * (d + 1)..(j + 1) * (d + 1)];
                            for i in 0..d {
                                row[i] += w * gval * gap.ell[i];
                            }
                            row[d] += w * gval * acc_ell;
                            let row = &mut a.rhs_m[j * (d + 1)..(j + 1) * (d + 1)];
                            for i in 0..d {
                                row[i] += w * gval * gap.jm[i];
                            }
                            row[d] += w * gval * acc_jm;
                        }
                    }
                }
                a.r[d] = w * uu * r_last;
                a.sa[d] = w * uu * sa_last;
                Ok(a)
            })
            .collect::<Result<_, CounterfactualError>>()?;
        let mut total = Accumulator::zeros(d, p);
        for a in &parts {
            total.add(a);
        }
        Ok(total)
    }

    /// `[[S, S e_u + c], [.., S_uu + corner]]` for a static block `S`.
    fn assemble(&self, s: &DMatrix<f64>, cross: &[f64], corner: f64) -> DMatrix<f64> {
        let d = self.layout.d;
        let u = self.layout.u_pos;
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(s);
        for i in 0..d {
            let v = s[(i, u)] + cross[i];
            m[(i, d)] = v;
            m[(d, i)] = v;
        }
        m[(d, d)] = s[(u, u)] + corner;
        m
    }

    /// Regression coefficients on the masked coordinates, zero elsewhere.
    fn masked_solve(&self, normal: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mask = &self.layout.mask;
        let k = mask.len();
        let sub = DMatrix::from_fn(k, k, |i, j| normal[(mask[i], mask[j])]);
        let sub_rhs = DMatrix::from_fn(k, rhs.ncols(), |i, j| rhs[(mask[i], j)]);
        let (sol, _) = solve_psd(&sub, &sub_rhs);
        let mut out = DMatrix::zeros(normal.nrows(), rhs.ncols());
        for (i, &m) in mask.iter().enumerate() {
            for j in 0..rhs.ncols() {
                out[(m, j)] = sol[(i, j)];
            }
        }
        out
    }

    pub fn evaluate(&self, psi: &PsiVector) -> Result<Evaluation, EstimatorError> {
        if psi.dim() != self.dim() {
            return Err(CounterfactualError::DimensionMismatch {
                psi: psi.psi2.len(),
                g: self.g.dim(),
            }
            .into());
        }
        let acc = self.accumulate(psi)?;
        let d = self.layout.d;
        let zd = d + 1;
        let p = self.dim();
        let normal = self.assemble(&self.sl, &acc.n_cross, acc.n_corner);
        let r = DMatrix::from_column_slice(zd, 1, &acc.r);
        let xi = self.masked_solve(&normal, &r);
        let quad = (xi.transpose() * &normal * &xi)[(0, 0)];
        let cross = (xi.transpose() * &r)[(0, 0)];
        let raw_variance = (acc.u2t - 2.0 * cross + quad) / acc.risk_time;
        let floored = !(raw_variance >= self.variance_floor);
        let variance = if floored { self.variance_floor } else { raw_variance };

        let b = self.assemble(&self.sq, &acc.b_cross, acc.b_corner);
        let gamma = match (self.index, &self.frozen) {
            (_, Some(frozen)) => frozen.clone(),
            (IndexChoice::Simple, None) => self.layout.simple_index(self.simple_scale),
            (IndexChoice::Optimal, None) => {
                // R = G - Ê(G | T >= u) from the risk-set regression; the contrast
                // E(G | T = u) - E(G | T >= u) is the coefficient of z in
                // E ∫ z R dM = E ∫ z z' β dΛ.
                let rhs_a = DMatrix::from_row_slice(p, zd, &acc.rhs_a).transpose();
                let rhs_m = DMatrix::from_row_slice(p, zd, &acc.rhs_m).transpose();
                let ga = self.masked_solve(&normal, &rhs_a);
                let jumps = self.assemble(&self.sjump, &acc.jump_cross, acc.jump_corner);
                let compensator = jumps - &b;
                let contrast = self.masked_solve(&compensator, &(rhs_m - &b * &ga));
                (contrast / variance).transpose()
            }
        };
        let sa = DMatrix::from_column_slice(zd, 1, &acc.sa);
        let inner = (sa - b * &xi) / self.n as f64;
        let ee = (&gamma * inner).column(0).iter().copied().collect();

        let features: Vec<OutcomeFeature> = (0..zd).map(|i| self.layout.feature(i)).collect();
        Ok(Evaluation {
            ee,
            outcome: OutcomeRegressionModel {
                psi: psi.clone(),
                features: features.clone(),
                coefficients: xi.column(0).iter().copied().collect(),
                residual_variance: variance,
                variance_floored: floored,
                effect_modifier: self.g.clone(),
            },
            index: IndexFunction {
                choice: self.index,
                rows: (0..p).map(|j| gamma.row(j).iter().copied().collect()).collect(),
                features,
            },
        })
    }

    /// Fixes `Γ` at its value at `psi` for all later evaluations, so that
    /// only `U(ψ)` and the outcome regression move with `ψ`.
    pub fn freeze_index(&mut self, psi: &PsiVector) -> Result<(), EstimatorError> {
        self.frozen = None;
        let e = self.evaluate(psi)?;
        let rows = &e.index.rows;
        self.frozen = Some(DMatrix::from_fn(rows.len(), self.layout.zdim(), |i, j| rows[i][j]));
        Ok(())
    }

    /// Uses a fixed `Γ` over the coordinates of `z`, one row per component of `ψ`.
    pub fn set_index_rows(&mut self, rows: &[Vec<f64>]) -> Result<(), EstimatorError> {
        let zd = self.layout.zdim();
        if rows.len() != self.dim() || rows.iter().any(|r| r.len() != zd) {
            return Err(EstimatorError::IndexShape {
                rows: rows.len(),
                columns: rows.first().map_or(0, Vec::len),
                expected: (self.dim(), zd),
            });
        }
        self.frozen = Some(DMatrix::from_fn(rows.len(), zd, |i, j| rows[i][j]));
        Ok(())
    }

    /// `P_n EE(ψ)`.
    pub fn ee(&self, psi: &PsiVector) -> Result<Vec<f64>, EstimatorError> {
        Ok(self.evaluate(psi)?.ee)
    }
}

/// `c(H̄_u) · [U(ψ) - ξ' z(u)]` as a predictable integrand on one subject.
struct ResidualIntegrand<'a> {
    layout: &'a Layout,
    index: &'a IndexFunction,
    xi: &'a [f64],
    u_total: f64,
    /// Accrued mimicking time at each gap start, by `k`.
    gap_start: Vec<f64>,
    baseline: &'a [f64],
}

impl PredictableIntegrand for ResidualIntegrand<'_> {
    fn dim(&self) -> usize {
        self.index.dim()
    }

    fn on_segment(&self, ctx: &SegmentContext, out: &mut [Quadratic]) {
        let layout = self.layout;
        let d = layout.d;
        let mut z0 = vec![0.0; d + 1];
        layout.phi0(
            self.baseline,
            ctx.view.covariates_by_index(ctx.segment.covariate_index),
            ctx.gap.k,
            &mut z0[..d],
        );
        z0[d] = self.gap_start[ctx.gap.k - 1];
        // dz/du = e_u + e_accrued.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let r0 = self.u_total - dot(self.xi, &z0);
        let r1 = -(self.xi[layout.u_pos] + self.xi[d]);
        for (o, row) in out.iter_mut().zip(&self.index.rows) {
            let c0 = dot(row, &z0);
            let c1 = row[layout.u_pos] + row[d];
            *o = [c0 * r0, c0 * r1 + c1 * r0, c1 * r1];
        }
    }
}

impl EstimatingEquation {
    /// One subject's `ω_i Σ_k ∫ c (U - ξ' z) dM̂` computed through
    /// [`stochastic_integral`], using the regressions in `eval`.
    pub fn estimating_function(
        &self,
        eval: &Evaluation,
        s: &SubjectTrajectory,
        weight: f64,
        inc: &MartingaleIncrements,
    ) -> Result<Vec<f64>, EstimatorError> {
        if weight == 0.0 {
            return Ok(vec![0.0; self.dim()]);
        }
        let psi = &eval.outcome.psi;
        let path = s.path();
        let gap_start = s
            .gap_windows()
            .iter()
            .map(|w| path_mimicking_time(path, psi, &self.g, 0.0, w.start))
            .collect::<Result<Vec<_>, _>>()?;
        let f = ResidualIntegrand {
            layout: &self.layout,
            index: &eval.index,
            xi: &eval.outcome.coefficients,
            u_total: path_mimicking_time(path, psi, &self.g, 0.0, s.followup_time())?,
            gap_start,
            baseline: s.baseline(),
        };
        let v = stochastic_integral(&f, s, inc)?;
        Ok(v.into_iter().map(|x| weight * x).collect())
    }

    /// Features `z` at a risk point, for tests and reports.
    pub fn features_at(
        &self,
        s: &SubjectTrajectory,
        k: usize,
        u: f64,
        psi: &PsiVector,
    ) -> Result<Vec<f64>, EstimatorError> {
        z_at(&self.layout, s, k, u, psi, &self.g)
    }
}
