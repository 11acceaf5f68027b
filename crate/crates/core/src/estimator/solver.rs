//! Newton-Raphson on `P_n EE(ψ)` with a central finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::equation::{EstimatingEquation, Evaluation};
use super::{EstimatorConfig, EstimatorError};
use crate::counterfactual::PsiVector;
use crate::linalg::reciprocal_condition;

/// One accepted Newton iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub psi: Vec<f64>,
    pub ee_norm: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub psi: PsiVector,
    pub evaluation: Evaluation,
    pub ee_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences with step `1e-5 (1 + |ψ_j|)` per coordinate.
pub(crate) fn jacobian(eq: &EstimatingEquation, psi: &[f64]) -> Result<DMatrix<f64>, EstimatorError> {
    let p = psi.len();
    let mut jac = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = 1e-5 * (1.0 + psi[j].abs());
        let mut up = psi.to_vec();
        let mut down = psi.to_vec();
        up[j] += h;
        down[j] -= h;
        let fu = eq.ee(&PsiVector::from_slice(&up))?;
        let fd = eq.ee(&PsiVector::from_slice(&down))?;
        for i in 0..p {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Reciprocal condition number after scaling columns to unit norm.
fn scaled_rcond(jac: &DMatrix<f64>) -> f64 {
    if jac.iter().any(|x| !x.is_finite()) {
        return 0.0;
    }
    let mut m = jac.clone();
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        if n == 0.0 {
            return 0.0;
        }
        c /= n;
    }
    reciprocal_condition(&m)
}

/// Solves `P_n EE(ψ) = 0` from `initial`. The outcome and index regressions
/// are refitted at every evaluated `ψ`.
pub fn solve_psi(
    eq: &EstimatingEquation,
    cfg: &EstimatorConfig,
    initial: &PsiVector,
) -> Result<Solution, EstimatorError> {
    let mut psi = initial.to_vec();
    let mut evaluation = eq.evaluate(initial)?;
    let mut ee_norm = norm(&evaluation.ee);
    let mut trace = vec![IterationRecord {
        psi: psi.clone(),
        ee_norm,
        halvings: 0,
    }];
    let mut iterations = 0;
    let finish = |psi: &[f64], evaluation: Evaluation, ee_norm, iterations, trace, converged| Solution {
        psi: PsiVector::from_slice(psi),
        evaluation,
        ee_norm,
        iterations,
        converged,
        trace,
    };
    while !(ee_norm <= cfg.tolerance) {
        if iterations == cfg.max_iterations {
            return Err(EstimatorError::NotConverged {
                reason: format!("no convergence in {iterations} iterations"),
                solution: Box::new(finish(&psi, evaluation, ee_norm, iterations, trace, false)),
            });
        }
        iterations += 1;
        let jac = jacobian(eq, &psi)?;
        let rcond = scaled_rcond(&jac);
        if !(rcond >= cfg.singular_rcond) {
            return Err(EstimatorError::Singular { psi, rcond });
        }
        let rhs = DVector::from_column_slice(&evaluation.ee);
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or(EstimatorError::Singular { psi: psi.clone(), rcond })?;
        let mut scale = 1.0;
        let mut accepted = None;
        for halvings in 0..=cfg.max_halvings {
            let cand: Vec<f64> = psi.iter().zip(step.iter()).map(|(x, s)| x - scale * s).collect();
            if let Ok(e) = eq.evaluate(&PsiVector::from_slice(&cand)) {
                let n = norm(&e.ee);
                if n < ee_norm {
                    accepted = Some((cand, e, n, halvings));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, e, n, halvings)) = accepted else {
            return Err(EstimatorError::NotConverged {
                reason: format!(
                    "no decrease of the estimating-equation norm after {} step halvings",
                    cfg.max_halvings
                ),
                solution: Box::new(finish(&psi, evaluation, ee_norm, iterations, trace, false)),
            });
        };
        psi = cand;
        evaluation = e;
        ee_norm = n;
        trace.push(IterationRecord {
            psi: psi.clone(),
            ee_norm,
            halvings,
        });
    }
    Ok(finish(&psi, evaluation, ee_norm, iterations, trace, true))
}
