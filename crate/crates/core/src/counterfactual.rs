//! The mimicking counterfactual time
//! `U(psi) = ∫_0^h exp{(psi1 + psi2' g(L_u)) A_u} du`, its gradient in `psi`,
//! and its inverse in `h`.
//!
//! All integrals are sums over the pieces of constant treatment and covariates.
//! They are accumulated as `h + Σ δ·expm1(η)` over treated pieces, so `psi = 0`
//! returns the horizon bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Schema, SubjectTrajectory, TreatmentPath};

/// Largest admissible `|psi1 + psi2' g|` on a treated piece.
pub const MAX_EXPONENT: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CounterfactualError {
    #[error("exponent {exponent} on treated piece [{start}, {end}) exceeds the limit {MAX_EXPONENT}")]
    Overflow { exponent: f64, start: f64, end: f64 },
    #[error("psi has {psi} effect-modification coefficients but g has dimension {g}")]
    DimensionMismatch { psi: usize, g: usize },
    #[error("horizon {horizon} outside [0, {followup}]")]
    HorizonOutOfRange { horizon: f64, followup: f64 },
    #[error("target value must be positive, got {0}")]
    NonPositiveTarget(f64),
    #[error("unknown covariate {0:?} in effect modifier")]
    UnknownCovariate(String),
    #[error("effect modifier has {names} columns but {centers} centering constants")]
    CenterCount { names: usize, centers: usize },
}

/// `psi = (psi1, psi2)`: treatment log time ratio and effect-modification terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiVector {
    pub psi1: f64,
    pub psi2: Vec<f64>,
}

impl PsiVector {
    pub fn new(psi1: f64, psi2: Vec<f64>) -> Self {
        Self { psi1, psi2 }
    }

    pub fn zeros(dim_g: usize) -> Self {
        Self::new(0.0, vec![0.0; dim_g])
    }

    /// `psi1` followed by `psi2`.
    ///
    /// # Panics
    ///
    /// If `v` is empty.
    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1..].to_vec())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.psi1);
        v.extend_from_slice(&self.psi2);
        v
    }

    /// `p = 1 + dim(g)`.
    pub fn dim(&self) -> usize {
        1 + self.psi2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.psi1.is_finite() && self.psi2.iter().all(|x| x.is_finite())
    }
}

/// `g(L)`: a named subset of covariate columns, each optionally shifted by a centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EffectModifierMap {
    names: Vec<String>,
    columns: Vec<usize>,
    centers: Vec<f64>,
}

impl EffectModifierMap {
    /// No effect modification: `p = 1`.
    pub fn absent() -> Self {
        Self::default()
    }

    /// Identity on the given columns, uncentered.
    pub fn identity(columns: Vec<usize>, names: Vec<String>) -> Self {
        let centers = vec![0.0; columns.len()];
        Self {
            names,
            columns,
            centers,
        }
    }

    /// Resolves covariate names against a schema.
    pub fn from_schema(
        schema: &Schema,
        names: &[String],
        centers: Option<&[f64]>,
    ) -> Result<Self, CounterfactualError> {
        let columns = names
            .iter()
            .map(|n| {
                schema
                    .covariate_index(n)
                    .ok_or_else(|| CounterfactualError::UnknownCovariate(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let centers = match centers {
            Some(c) if c.len() != names.len() => {
                return Err(CounterfactualError::CenterCount {
                    names: names.len(),
                    centers: c.len(),
                })
            }
            Some(c) => c.to_vec(),
            None => vec![0.0; names.len()],
        };
        Ok(Self {
            names: names.to_vec(),
            columns,
            centers,
        })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Writes `g(l)` into `out`.
    pub fn apply(&self, l: &[f64], out: &mut [f64]) {
        for (o, (&c, &m)) in out.iter_mut().zip(self.columns.iter().zip(&self.centers)) {
            *o = l[c] - m;
        }
    }

    pub fn eval(&self, l: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply(l, &mut out);
        out
    }

    /// `psi1 + psi2' g(l)`.
    pub fn exponent(&self, psi: &PsiVector, l: &[f64]) -> f64 {
        let mut eta = psi.psi1;
        for ((&c, &m), &b) in self.columns.iter().zip(&self.centers).zip(&psi.psi2) {
            eta += b * (l[c] - m);
        }
        eta
    }

    fn check(&self, psi: &PsiVector) -> Result<(), CounterfactualError> {
        if psi.psi2.len() != self.dim() {
            return Err(CounterfactualError::DimensionMismatch {
                psi: psi.psi2.len(),
                g: self.dim(),
            });
        }
        Ok(())
    }
}

fn treated_exponent(
    path: &TreatmentPath,
    psi: &PsiVector,
    g: &EffectModifierMap,
    covariate_index: usize,
    start: f64,
    end: f64,
) -> Result<f64, CounterfactualError> {
    let eta = g.exponent(psi, path.covariates.value(covariate_index));
    if !(eta.abs() <= MAX_EXPONENT) {
        return Err(CounterfactualError::Overflow {
            exponent: eta,
            start,
            end,
        });
    }
    Ok(eta)
}

/// `∫_from^to exp{(psi1 + psi2' g(L_u)) A_u} du` along a path.
pub fn path_mimicking_time(
    path: &TreatmentPath,
    psi: &PsiVector,
    g: &EffectModifierMap,
    from: f64,
    to: f64,
) -> Result<f64, CounterfactualError> {
    g.check(psi)?;
    let mut excess = 0.0;
    for p in path.pieces_with_breaks(to, &[from]) {
        if p.start < from || !p.treated {
            continue;
        }
        let eta = treated_exponent(path, psi, g, p.covariate_index, p.start, p.end)?;
        excess += p.length() * eta.exp_m1();
    }
    Ok((to - from) + excess)
}

/// `∂U/∂psi` over `[0, horizon]` along a path.
pub fn path_mimicking_gradient(
    path: &TreatmentPath,
    psi: &PsiVector,
    g: &EffectModifierMap,
    horizon: f64,
) -> Result<Vec<f64>, CounterfactualError> {
    g.check(psi)?;
    let mut grad = vec![0.0; psi.dim()];
    let mut gl = vec![0.0; g.dim()];
    for p in path.pieces(horizon) {
        if !p.treated {
            continue;
        }
        let eta = treated_exponent(path, psi, g, p.covariate_index, p.start, p.end)?;
        let w = p.length() * eta.exp();
        grad[0] += w;
        g.apply(path.covariates.value(p.covariate_index), &mut gl);
        for (d, x) in grad[1..].iter_mut().zip(&gl) {
            *d += w * x;
        }
    }
    Ok(grad)
}

fn check_horizon(s: &SubjectTrajectory, horizon: f64) -> Result<(), CounterfactualError> {
    if !(horizon >= 0.0 && horizon <= s.followup_time()) {
        return Err(CounterfactualError::HorizonOutOfRange {
            horizon,
            followup: s.followup_time(),
        });
    }
    Ok(())
}

/// `U_h(psi)` for `horizon <= X`.
pub fn mimicking_time(
    s: &SubjectTrajectory,
    psi: &PsiVector,
    g: &EffectModifierMap,
    horizon: f64,
) -> Result<f64, CounterfactualError> {
    check_horizon(s, horizon)?;
    path_mimicking_time(s.path(), psi, g, 0.0, horizon)
}

/// `∂U_h(psi)/∂psi` for `horizon <= X`.
pub fn mimicking_gradient(
    s: &SubjectTrajectory,
    psi: &PsiVector,
    g: &EffectModifierMap,
    horizon: f64,
) -> Result<Vec<f64>, CounterfactualError> {
    check_horizon(s, horizon)?;
    path_mimicking_gradient(s.path(), psi, g, horizon)
}

/// The horizon `tau` at which the path accrues `u_value` of mimicking time.
pub fn invert_mimicking(
    u_value: f64,
    path: &TreatmentPath,
    psi: &PsiVector,
    g: &EffectModifierMap,
) -> Result<f64, CounterfactualError> {
    if !(u_value > 0.0) {
        return Err(CounterfactualError::NonPositiveTarget(u_value));
    }
    g.check(psi)?;
    // U(t) = t + excess(t) on the piece being walked.
    let mut excess = 0.0;
    for p in path.pieces(f64::INFINITY) {
        let (rate, delta_excess) = if p.treated {
            let eta = treated_exponent(path, psi, g, p.covariate_index, p.start, p.end)?;
            (eta.exp(), p.length() * eta.exp_m1())
        } else {
            (1.0, 0.0)
        };
        let u_end = p.end + excess + delta_excess;
        if u_end >= u_value {
            if excess == 0.0 && rate == 1.0 {
                return Ok(u_value);
            }
            return Ok(p.start + (u_value - p.start - excess) / rate);
        }
        excess += delta_excess;
    }
    unreachable!("the last piece is unbounded")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{normalize_dispensations, CovariateProcess};

    fn path(refills: &[f64], w: f64) -> TreatmentPath {
        TreatmentPath::new(
            CovariateProcess::new(vec![0.0, 7.0], vec![vec![0.4], vec![-1.2]]).unwrap(),
            normalize_dispensations(refills, w).unwrap(),
        )
    }

    #[test]
    fn zero_psi_returns_horizon_exactly() {
        let p = path(&[0.0, 13.3, 40.1], 10.0);
        let g = EffectModifierMap::identity(vec![0], vec!["l1".into()]);
        let u = path_mimicking_time(&p, &PsiVector::zeros(1), &g, 0.0, 57.123).unwrap();
        assert_eq!(u, 57.123);
        assert_eq!(invert_mimicking(57.123, &p, &PsiVector::zeros(1), &g).unwrap(), 57.123);
    }

    #[test]
    fn two_segment_path_accrues_doubled_time() {
        // On for 10 days, off for 5.
        let p = TreatmentPath::new(
            CovariateProcess::constant(vec![]),
            normalize_dispensations(&[0.0, 100.0], 10.0).unwrap(),
        );
        let psi = PsiVector::new(std::f64::consts::LN_2, vec![]);
        let u = path_mimicking_time(&p, &psi, &EffectModifierMap::absent(), 0.0, 15.0).unwrap();
        assert!((u - 25.0).abs() < 1e-12);
    }

    #[test]
    fn overflow_is_reported() {
        let p = path(&[0.0, 20.0], 10.0);
        let psi = PsiVector::new(51.0, vec![0.0]);
        let g = EffectModifierMap::identity(vec![0], vec!["l1".into()]);
        let err = path_mimicking_time(&p, &psi, &g, 0.0, 5.0).unwrap_err();
        assert!(matches!(err, CounterfactualError::Overflow { start, .. } if start == 0.0));
    }

    #[test]
    fn gradient_vanishes_without_treated_time() {
        let p = path(&[0.0, 20.0], 10.0);
        let g = EffectModifierMap::identity(vec![0], vec!["l1".into()]);
        let psi = PsiVector::new(0.3, vec![0.2]);
        let grad = path_mimicking_gradient(&p, &psi, &g, 10.0).unwrap();
        assert!(grad[0] > 0.0);
        let mut shifted = 0.0;
        for v in [(0.0, 7.0, 0.4), (7.0f64, 10.0f64, -1.2f64)] {
            shifted += (v.1 - v.0) * (0.3f64 + 0.2 * v.2).exp() * v.2;
        }
        assert!((grad[1] - shifted).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = path(&[0.0, 20.0], 10.0);
        let err = path_mimicking_time(&p, &PsiVector::zeros(2), &EffectModifierMap::absent(), 0.0, 1.0);
        assert!(matches!(err, Err(CounterfactualError::DimensionMismatch { .. })));
    }

    #[test]
    fn inversion_rejects_non_positive_targets() {
        let p = path(&[0.0, 20.0], 10.0);
        let g = EffectModifierMap::absent();
        assert!(invert_mimicking(0.0, &p, &PsiVector::zeros(0), &g).is_err());
    }
}
