//! Small dense solves shared by the model fits.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for pseudo-inverse solves.
const RANK_TOLERANCE: f64 = 1e-12;

/// Minimum-norm solution of the symmetric positive semi-definite system `a x = b`.
///
/// The system is equilibrated to unit diagonal first; directions with
/// relative singular value below `1e-12` are dropped. Returns the solution
/// (one column per right-hand side) and the numerical rank.
pub fn solve_psd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = a[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let rhs = DMatrix::from_fn(n, b.ncols(), |i, j| b[(i, j)] * scale[i]);
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * RANK_TOLERANCE;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let mut y = DMatrix::zeros(n, b.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if !(s > cutoff) {
            continue;
        }
        for c in 0..b.ncols() {
            let mut proj = 0.0;
            for i in 0..n {
                proj += u[(i, k)] * rhs[(i, c)];
            }
            let coef = proj / s;
            for i in 0..n {
                y[(i, c)] += vt[(k, i)] * coef;
            }
        }
    }
    for i in 0..n {
        for c in 0..b.ncols() {
            y[(i, c)] *= scale[i];
        }
    }
    (y, rank)
}

/// Newton step `x` with `h x = g` for a negative-definite Hessian `h`.
pub fn newton_step(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let neg = -h;
    neg.cholesky().map(|c| -c.solve(g)).or_else(|| h.clone().lu().solve(g))
}

/// Ratio of the smallest to the largest singular value.
pub fn reciprocal_condition(a: &DMatrix<f64>) -> f64 {
    let s = a.singular_values();
    let max = s.max();
    if max > 0.0 && max.is_finite() {
        s.min() / max
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_solve_handles_rank_deficiency() {
        // Second column duplicates the first.
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let a = x.transpose() * &x;
        let b = DMatrix::from_column_slice(2, 1, &[14.0, 14.0]);
        let (sol, rank) = solve_psd(&a, &b);
        assert_eq!(rank, 1);
        assert!((sol[(0, 0)] - 0.5).abs() < 1e-12 && (sol[(1, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psd_solve_matches_exact_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let (sol, rank) = solve_psd(&a, &b);
        assert_eq!(rank, 2);
        assert!((sol[(0, 0)] - 1.0 / 11.0).abs() < 1e-14);
        assert!((sol[(1, 0)] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn newton_step_solves_negative_definite_systems() {
        let h = DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.5, -1.0]);
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let x = newton_step(&h, &g).unwrap();
        let r = &h * &x - &g;
        assert!(r.norm() < 1e-14);
    }
}
