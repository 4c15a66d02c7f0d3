//! Small dense quasi-Newton minimizer for the latent population M-step.

/// Result of a BFGS run.
#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` (returning value and gradient) from `x0` with BFGS and an
/// Armijo backtracking line search. Stops when the gradient max-norm drops
/// below `tol`. The returned point never has a larger value than `x0`.
pub fn bfgs<F>(mut f: F, x0: &[f64], tol: f64, max_iter: usize) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut hinv = identity(n);
    let mut scaled = false;
    let mut iterations = 0;
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));

    while iterations < max_iter {
        if norm(&g) < tol {
            return BfgsOutcome { gradient_norm: norm(&g), x, value: fx, iterations, converged: true };
        }
        iterations += 1;
        let mut dir: Vec<f64> = (0..n).map(|r| -(0..n).map(|c| hinv[r * n + c] * g[c]).sum::<f64>()).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // lost descent; restart from steepest descent
            hinv = identity(n);
            scaled = false;
            dir = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if !scaled {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let gamma = sy / yy;
                hinv.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            bfgs_update(&mut hinv, &s, &y, sy);
        }
    }
    let gradient_norm = norm(&g);
    BfgsOutcome { converged: gradient_norm < tol, gradient_norm, x, value: fx, iterations }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `H <- (I - rho s y') H (I - rho y s') + rho s s'`
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|r| (0..n).map(|c| h[r * n + c] * y[c]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for r in 0..n {
        for c in 0..n {
            h[r * n + c] += -rho * (hy[r] * s[c] + s[r] * hy[c]) + (rho * rho * yhy + rho) * s[r] * s[c];
        }
    }
}
