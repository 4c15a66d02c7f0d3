use nalgebra::DMatrix;

use crate::em::soft_threshold;

/// Coordinate-change tolerance of the decorrelation lasso.
pub const LASSO_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 20_000;

/// Solution of a covariance-form lasso.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub coefficients: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Coordinates with a zero diagonal, forced to 0.
    pub degenerate: Vec<usize>,
    /// `max_k |(G w - b)_k|`.
    pub kkt_residual: f64,
}

/// Minimizes `w'Gw/2 - b'w + lambda |w|_1` by cyclic coordinate descent,
/// stopping when no coordinate moves by more than `tol` in a sweep.
///
/// With `lambda = 0` the descent is started from the direct solve of the
/// normal equations when they are positive definite.
pub fn lasso_covariance(g: &DMatrix<f64>, b: &[f64], lambda: f64, tol: f64) -> LassoSolution {
    let p = b.len();
    assert_eq!(g.nrows(), p);
    let degenerate: Vec<usize> = (0..p).filter(|&k| !(g[(k, k)] > 0.0)).collect();
    let active: Vec<usize> = (0..p).filter(|k| !degenerate.contains(k)).collect();
    if !degenerate.is_empty() {
        log::warn!("{} nuisance coordinates have a zero score column; their weights are set to 0", degenerate.len());
    }

    let mut w = vec![0.0; p];
    if lambda == 0.0 && !active.is_empty() {
        let ga = DMatrix::from_fn(active.len(), active.len(), |r, c| g[(active[r], active[c])]);
        if let Some(chol) = ga.cholesky() {
            let rhs = nalgebra::DVector::from_iterator(active.len(), active.iter().map(|&k| b[k]));
            let sol = chol.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                for (i, &k) in active.iter().enumerate() {
                    w[k] = sol[i];
                }
            }
        }
    }

    // r = G w - b
    let mut r: Vec<f64> = (0..p).map(|k| (0..p).map(|l| g[(k, l)] * w[l]).sum::<f64>() - b[k]).collect();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for &k in &active {
            let gkk = g[(k, k)];
            let z = gkk * w[k] - r[k];
            let new = soft_threshold(z, lambda) / gkk;
            let delta = new - w[k];
            if delta != 0.0 {
                for (l, rl) in r.iter_mut().enumerate() {
                    *rl += g[(l, k)] * delta;
                }
                w[k] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("decorrelation lasso stopped after {sweeps} sweeps without reaching tolerance {tol}");
    }
    let kkt_residual = active.iter().map(|&k| r[k].abs()).fold(0.0, f64::max);
    LassoSolution { coefficients: w, sweeps, converged, degenerate, kkt_residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn huge_penalty_gives_zero() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = lasso_covariance(&g, &[1.0, -3.0], 1e6, 1e-8);
        assert_eq!(s.coefficients, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_penalty_solves_normal_equations() {
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let b = [1.0, -0.5, 0.25];
        let s = lasso_covariance(&g, &b, 0.0, 1e-12);
        let direct = g.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_row_slice(&b));
        for k in 0..3 {
            assert_abs_diff_eq!(s.coefficients[k], direct[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn kkt_holds_with_penalty() {
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let b = [1.0, -0.05, 0.25];
        let lambda = 0.1;
        let s = lasso_covariance(&g, &b, lambda, 1e-10);
        assert!(s.converged);
        assert!(s.kkt_residual <= lambda + 1e-6);
        for k in 0..3 {
            let r: f64 = (0..3).map(|l| g[(k, l)] * s.coefficients[l]).sum::<f64>() - b[k];
            if s.coefficients[k] != 0.0 {
                assert_abs_diff_eq!(r, -lambda * s.coefficients[k].signum(), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_column_is_dropped() {
        let g = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let s = lasso_covariance(&g, &[0.0, 2.0], 0.0, 1e-10);
        assert_eq!(s.degenerate, vec![0]);
        assert_eq!(s.coefficients[0], 0.0);
        assert_abs_diff_eq!(s.coefficients[1], 2.0, epsilon = 1e-12);
    }
}
