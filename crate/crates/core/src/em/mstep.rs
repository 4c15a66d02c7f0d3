use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::bernoulli_logit;
use crate::optim::bfgs;
use crate::params::{dot, ItemParams, PopulationParams};
use crate::quadrature::QuadratureGrid;

use super::estep::PosteriorWeights;
use super::MAX_IRLS;

/// Posterior weights below this are dropped from the item pseudo-data.
const PRUNE: f64 = 1e-14;

/// Expanded `(person, node)` pseudo-records shared by all item M-steps,
/// plus the first two posterior moments of theta per person.
pub(crate) struct Records {
    offsets: Vec<usize>,
    theta: Vec<f64>,
    weight: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl Records {
    pub(crate) fn new(posterior: &[f64], grid: &QuadratureGrid, n: usize) -> Self {
        let q = grid.n_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut theta = Vec::with_capacity(n * q);
        let mut weight = Vec::with_capacity(n * q);
        let mut m1 = Vec::with_capacity(n);
        let mut m2 = Vec::with_capacity(n);
        let mut nodes = vec![0.0; q];
        offsets.push(0);
        for i in 0..n {
            grid.nodes_into(i, &mut nodes);
            let row = &posterior[i * q..(i + 1) * q];
            let (mut s1, mut s2) = (0.0, 0.0);
            for (&e, &t) in row.iter().zip(&nodes) {
                s1 += e * t;
                s2 += e * t * t;
                if e >= PRUNE {
                    theta.push(t);
                    weight.push(e);
                }
            }
            m1.push(s1);
            m2.push(s2);
            offsets.push(theta.len());
        }
        Self { offsets, theta, weight, m1, m2 }
    }

    fn n_persons(&self) -> usize {
        self.m1.len()
    }
}

fn check_weights(e: &PosteriorWeights, data: &Dataset, grid: &QuadratureGrid) -> Result<()> {
    if e.n_persons() != data.n_persons() || grid.n_persons() != data.n_persons() || e.n_nodes() != grid.n_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "posterior is {}x{}, grid is {}x{}, data has {} persons",
            e.n_persons(),
            e.n_nodes(),
            grid.n_persons(),
            grid.n_nodes(),
            data.n_persons()
        )));
    }
    Ok(())
}

/// Result of a population M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStep {
    /// `(gamma, delta)` concatenated.
    pub values: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
}

impl PopulationStep {
    pub fn params(&self) -> PopulationParams {
        let k = self.values.len() / 2;
        PopulationParams::new(self.values[..k].to_vec(), self.values[k..].to_vec())
    }
}

/// Expected negative complete-data log density of theta and its gradient.
fn population_objective(records: &Records, data: &Dataset, v: &[f64]) -> (f64, Vec<f64>) {
    let k = data.n_covariates();
    let n = records.n_persons();
    let (gamma, delta) = v.split_at(k);
    let mut value = 0.0;
    let mut grad = vec![0.0; 2 * k];
    for i in 0..n {
        let x = data.covariates_of(i);
        let mu = dot(gamma, x);
        let s = dot(delta, x);
        let inv = (-s).exp();
        let (m1, m2) = (records.m1[i], records.m2[i]);
        let r = m2 - 2.0 * mu * m1 + mu * mu;
        value += 0.5 * s + 0.5 * r * inv;
        let gm = (mu - m1) * inv;
        let gs = 0.5 - 0.5 * r * inv;
        for c in 0..k {
            grad[c] += x[c] * gm;
            grad[k + c] += x[c] * gs;
        }
    }
    let nf = n as f64;
    grad.iter_mut().for_each(|g| *g /= nf);
    (value / nf + 0.5 * (2.0 * std::f64::consts::PI).ln(), grad)
}

pub(crate) fn population_step_on_records(records: &Records, data: &Dataset, start: &[f64], tol: f64) -> PopulationStep {
    let out = bfgs(|v| population_objective(records, data, v), start, tol, 200);
    PopulationStep { values: out.x, objective: out.value, converged: out.converged }
}

/// Population M-step: minimizes `-(1/n) sum_i sum_q e_iq log phi(theta_iq | gamma'x_i, exp(delta'x_i))`
/// by BFGS until the gradient max-norm is below `tol`.
pub fn m_step_population(
    e: &PosteriorWeights,
    data: &Dataset,
    grid: &QuadratureGrid,
    start: &PopulationParams,
    tol: f64,
) -> Result<PopulationStep> {
    check_weights(e, data, grid)?;
    if start.n_covariates() != data.n_covariates() {
        return Err(Error::DimensionMismatch("start population does not match covariates".into()));
    }
    let records = Records::new(e.values(), grid, data.n_persons());
    let v0: Vec<f64> = start.mean_effects.iter().chain(&start.logvar_effects).copied().collect();
    Ok(population_step_on_records(&records, data, &v0, tol))
}

/// `sign(z) * max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Result of an item M-step. `values` is `(a, d, beta0, beta1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemStep {
    pub values: Vec<f64>,
    /// Penalized weighted objective at `values`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ItemStep {
    pub fn params(&self) -> ItemParams {
        let k = (self.values.len() - 2) / 2;
        ItemParams::new(self.values[0], self.values[1], self.values[2..2 + k].to_vec(), self.values[2 + k..].to_vec())
    }
}

/// Smooth weighted logistic loss of one item with its gradient and Hessian.
struct ItemEval {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn item_eval(records: &Records, data: &Dataset, item: usize, v: &[f64]) -> ItemEval {
    let k = data.n_covariates();
    let p_dim = 2 + 2 * k;
    let n = records.n_persons();
    let mut value = 0.0;
    let mut grad = vec![0.0; p_dim];
    let mut hess = vec![0.0; p_dim * p_dim];
    // slot 0 is the intercept direction (1, x), slot 1 the slope direction
    let mut coef = vec![0.0; p_dim];
    let mut slot = vec![0usize; p_dim];
    slot[0] = 1;
    for c in 0..k {
        slot[2 + k + c] = 1;
    }
    for i in 0..n {
        let x = data.covariates_of(i);
        let y = data.responses_of(i)[item];
        let d_i = v[1] + dot(&v[2..2 + k], x);
        let a_i = v[0] + dot(&v[2 + k..], x);
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let yf = f64::from(y);
        for r in records.offsets[i]..records.offsets[i + 1] {
            let t = records.theta[r];
            let w = records.weight[r];
            let (p, logf) = bernoulli_logit(d_i + a_i * t, y);
            value -= w * logf;
            let res = w * (p - yf);
            g0 += res;
            g1 += res * t;
            let c = w * p * (1.0 - p);
            h00 += c;
            h01 += c * t;
            h11 += c * t * t;
        }
        coef[0] = 1.0;
        coef[1] = 1.0;
        coef[2..2 + k].copy_from_slice(x);
        coef[2 + k..].copy_from_slice(x);
        let sg = [g0, g1];
        let sh = [[h00, h01], [h01, h11]];
        for a in 0..p_dim {
            if coef[a] == 0.0 {
                continue;
            }
            grad[a] += coef[a] * sg[slot[a]];
            let ha = sh[slot[a]];
            let row = &mut hess[a * p_dim..(a + 1) * p_dim];
            for b in a..p_dim {
                row[b] += coef[a] * coef[b] * ha[slot[b]];
            }
        }
    }
    let nf = n as f64;
    grad.iter_mut().for_each(|g| *g /= nf);
    for a in 0..p_dim {
        for b in a..p_dim {
            let h = hess[a * p_dim + b] / nf;
            hess[a * p_dim + b] = h;
            hess[b * p_dim + a] = h;
        }
    }
    ItemEval { value: value / nf, grad, hess }
}

fn l1(v: &[f64], penalized: &[bool]) -> f64 {
    v.iter().zip(penalized).filter(|(_, &m)| m).map(|(x, _)| x.abs()).sum()
}

/// Minimizes the quadratic model `g'(u - x) + (u - x)'H(u - x)/2 + lambda |u|_pen`
/// by cyclic coordinate descent.
fn prox_newton_direction(x: &[f64], ev: &ItemEval, lambda: f64, penalized: &[bool], fixed: &[bool], tol: f64) -> Vec<f64> {
    let p = x.len();
    let h = &ev.hess;
    let mut u = x.to_vec();
    // model gradient at u: g + H (u - x)
    let mut mg = ev.grad.clone();
    let inner_tol = (tol * 1e-3).max(1e-13);
    for _ in 0..1000 {
        let mut max_change = 0.0f64;
        for c in 0..p {
            let hcc = h[c * p + c];
            let new = if fixed[c] {
                0.0
            } else if hcc <= 1e-300 {
                u[c]
            } else {
                let z = u[c] - mg[c] / hcc;
                if penalized[c] {
                    soft_threshold(hcc * z, lambda) / hcc
                } else {
                    z
                }
            };
            let delta = new - u[c];
            if delta != 0.0 {
                for (b, m) in mg.iter_mut().enumerate() {
                    *m += h[c * p + b] * delta;
                }
                u[c] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < inner_tol {
            break;
        }
    }
    u
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn item_step_on_records(
    records: &Records,
    data: &Dataset,
    item: usize,
    lambda: f64,
    start: &[f64],
    penalized: &[bool],
    fixed: &[bool],
    tol: f64,
) -> ItemStep {
    let mut x: Vec<f64> = start.iter().zip(fixed).map(|(&v, &f)| if f { 0.0 } else { v }).collect();
    let mut ev = item_eval(records, data, item, &x);
    let mut obj = ev.value + lambda * l1(&x, penalized);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_IRLS {
        iterations += 1;
        let u = prox_newton_direction(&x, &ev, lambda, penalized, fixed, tol);
        let dir: Vec<f64> = u.iter().zip(&x).map(|(a, b)| a - b).collect();
        let size = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if size < tol {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let te = item_eval(records, data, item, &trial);
            let tobj = te.value + lambda * l1(&trial, penalized);
            if tobj <= obj {
                accepted = Some((trial, te, tobj));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, te, tobj)) = accepted else {
            // no decrease possible in floating point; the current point is stationary to rounding
            converged = size < tol.sqrt();
            break;
        };
        x = trial;
        ev = te;
        obj = tobj;
        if t * size < tol {
            converged = true;
            break;
        }
    }
    ItemStep { values: x, objective: obj, iterations, converged }
}

/// Penalized weighted objective of one item and the gradient of its smooth part.
pub fn item_objective(
    e: &PosteriorWeights,
    data: &Dataset,
    grid: &QuadratureGrid,
    item: usize,
    lambda: f64,
    params: &ItemParams,
) -> Result<(f64, Vec<f64>)> {
    check_weights(e, data, grid)?;
    check_item(data, item, params)?;
    let records = Records::new(e.values(), grid, data.n_persons());
    let v = item_vector(params);
    let k = data.n_covariates();
    let penalized: Vec<bool> = (0..v.len()).map(|c| c >= 2 && c < 2 + 2 * k).collect();
    let ev = item_eval(&records, data, item, &v);
    Ok((ev.value + lambda * l1(&v, &penalized), ev.grad))
}

fn check_item(data: &Dataset, item: usize, params: &ItemParams) -> Result<()> {
    if item >= data.n_items() {
        return Err(Error::InvalidArgument(format!("item index {item} out of range")));
    }
    params.validate(data.n_covariates())
}

fn item_vector(params: &ItemParams) -> Vec<f64> {
    let mut v = vec![params.slope, params.intercept];
    v.extend_from_slice(&params.d_dif);
    v.extend_from_slice(&params.a_dif);
    v
}

/// Item M-step: proximal Newton (IRLS) outer loop with cyclic coordinate
/// descent on the quadratic model and a step-halving line search.
///
/// `fixed_zero_mask` has length `2K` and marks the item's DIF effects
/// (d-DIF first, then a-DIF) that are held at zero. All other DIF effects
/// carry the penalty `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn m_step_item(
    e: &PosteriorWeights,
    data: &Dataset,
    grid: &QuadratureGrid,
    item: usize,
    lambda: f64,
    start: &ItemParams,
    tol: f64,
    fixed_zero_mask: &[bool],
) -> Result<ItemStep> {
    check_weights(e, data, grid)?;
    check_item(data, item, start)?;
    let k = data.n_covariates();
    if fixed_zero_mask.len() != 2 * k {
        return Err(Error::DimensionMismatch(format!(
            "fixed-zero mask has length {}, expected {}",
            fixed_zero_mask.len(),
            2 * k
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let mut fixed = vec![false, false];
    fixed.extend_from_slice(fixed_zero_mask);
    let penalized: Vec<bool> = fixed.iter().enumerate().map(|(c, &f)| c >= 2 && !f).collect();
    let records = Records::new(e.values(), grid, data.n_persons());
    Ok(item_step_on_records(&records, data, item, lambda, &item_vector(start), &penalized, &fixed, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::posterior_weights;
    use crate::params::ParamVector;
    use crate::quadrature::build_quadrature;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.5, 0.5), -2.0);
        assert_eq!(soft_threshold(1.0, 0.0), 1.0);
    }

    fn simulated(n: usize, k: usize, seed: u64) -> (Dataset, ParamVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = vec![
            ItemParams::new(1.5, 0.2, vec![0.4; k], vec![0.3; k]),
            ItemParams::new(1.0, -0.5, vec![0.0; k], vec![0.0; k]),
            ItemParams::new(2.0, 0.8, vec![-0.3; k], vec![0.0; k]),
        ];
        let pop = PopulationParams::new(vec![0.3; k], vec![0.2; k]);
        let truth = ParamVector::new(items, pop).unwrap();
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for _ in 0..n {
            let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mu = dot(&truth.population.mean_effects, &x);
            let sd = (0.5 * dot(&truth.population.logvar_effects, &x)).exp();
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let theta = mu + sd * z;
            let y = truth
                .items
                .iter()
                .map(|it| {
                    let p = 1.0 / (1.0 + (-(it.intercept_at(&x) + it.slope_at(&x) * theta)).exp());
                    u8::from(rng.random::<f64>() < p)
                })
                .collect();
            ys.push(y);
            xs.push(x);
        }
        (Dataset::from_rows(&ys, &xs).unwrap(), truth)
    }

    #[test]
    fn flat_population_objective_keeps_start() {
        let data = Dataset::from_rows(&[vec![1], vec![0]], &[vec![0.0], vec![0.0]]).unwrap();
        let params = ParamVector::default_start(1, 1);
        let grid = build_quadrature(9, &params.population, &data).unwrap();
        let e = posterior_weights(&params, &data, &grid).unwrap();
        let start = PopulationParams::new(vec![0.7], vec![-0.3]);
        let out = m_step_population(&e, &data, &grid, &start, 1e-8).unwrap();
        assert_eq!(out.params(), start);
    }

    #[test]
    fn population_step_recovers_truth_from_exact_posterior() {
        let (data, truth) = simulated(4000, 2, 3);
        let grid = build_quadrature(49, &truth.population, &data).unwrap();
        let e = posterior_weights(&truth, &data, &grid).unwrap();
        let out = m_step_population(&e, &data, &grid, &PopulationParams::zeros(2), 1e-8).unwrap();
        assert!(out.converged);
        for (a, b) in out.values.iter().zip(truth.population.mean_effects.iter().chain(&truth.population.logvar_effects)) {
            assert!((a - b).abs() < 0.1, "{a} vs {b}");
        }
    }

    #[test]
    fn population_step_never_increases_objective() {
        let (data, truth) = simulated(300, 2, 5);
        let grid = build_quadrature(21, &truth.population, &data).unwrap();
        let e = posterior_weights(&truth, &data, &grid).unwrap();
        let records = Records::new(e.values(), &grid, data.n_persons());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let start: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let before = population_objective(&records, &data, &start).0;
            let out = population_step_on_records(&records, &data, &start, 1e-8);
            assert!(out.objective <= before);
        }
    }

    #[test]
    fn population_gradient_matches_finite_differences() {
        let (data, truth) = simulated(200, 2, 6);
        let grid = build_quadrature(15, &truth.population, &data).unwrap();
        let e = posterior_weights(&truth, &data, &grid).unwrap();
        let records = Records::new(e.values(), &grid, data.n_persons());
        let v = [0.1, -0.2, 0.3, 0.05];
        let (_, g) = population_objective(&records, &data, &v);
        for c in 0..4 {
            let mut up = v;
            let mut dn = v;
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let fd = (population_objective(&records, &data, &up).0 - population_objective(&records, &data, &dn).0) / 2e-6;
            assert_abs_diff_eq!(g[c], fd, epsilon = 1e-7);
        }
    }

    fn setup(seed: u64) -> (Dataset, QuadratureGrid, PosteriorWeights) {
        let (data, truth) = simulated(400, 2, seed);
        let grid = build_quadrature(21, &truth.population, &data).unwrap();
        let e = posterior_weights(&truth, &data, &grid).unwrap();
        (data, grid, e)
    }

    #[test]
    fn item_gradient_and_hessian_match_finite_differences() {
        let (data, grid, e) = setup(8);
        let records = Records::new(e.values(), &grid, data.n_persons());
        let v = vec![1.2, 0.1, 0.2, -0.1, 0.3, 0.05];
        let ev = item_eval(&records, &data, 0, &v);
        for c in 0..6 {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let eu = item_eval(&records, &data, 0, &up);
            let ed = item_eval(&records, &data, 0, &dn);
            assert_abs_diff_eq!(ev.grad[c], (eu.value - ed.value) / 2e-6, epsilon = 1e-7);
            for b in 0..6 {
                assert_abs_diff_eq!(ev.hess[c * 6 + b], (eu.grad[b] - ed.grad[b]) / 2e-6, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn item_step_satisfies_kkt() {
        let (data, grid, e) = setup(11);
        for lambda in [0.005, 0.02, 0.1] {
            for j in 0..3 {
                let start = ItemParams::without_dif(1.0, 0.0, 2);
                let out = m_step_item(&e, &data, &grid, j, lambda, &start, 1e-6, &[false; 4]).unwrap();
                assert!(out.converged);
                let (_, g) = item_objective(&e, &data, &grid, j, 0.0, &out.params()).unwrap();
                assert!(g[0].abs() < 1e-5 && g[1].abs() < 1e-5, "{g:?}");
                for c in 2..6 {
                    if out.values[c] == 0.0 {
                        assert!(g[c].abs() <= lambda + 1e-6);
                    } else {
                        assert!((g[c] + lambda * out.values[c].signum()).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn huge_lambda_zeroes_dif_and_matches_plain_fit() {
        let (data, grid, e) = setup(12);
        let start = ItemParams::new(1.0, 0.0, vec![0.2, 0.1], vec![-0.1, 0.3]);
        let big = m_step_item(&e, &data, &grid, 0, 1e6, &start, 1e-8, &[false; 4]).unwrap();
        assert!(big.values[2..].iter().all(|&b| b == 0.0));
        let plain = m_step_item(&e, &data, &grid, 0, 0.0, &start, 1e-8, &[true; 4]).unwrap();
        assert_abs_diff_eq!(big.values[0], plain.values[0], epsilon = 1e-6);
        assert_abs_diff_eq!(big.values[1], plain.values[1], epsilon = 1e-6);
    }

    #[test]
    fn fixed_coordinates_stay_zero() {
        let (data, grid, e) = setup(13);
        let start = ItemParams::new(1.0, 0.0, vec![0.2, 0.1], vec![-0.1, 0.3]);
        let out = m_step_item(&e, &data, &grid, 2, 0.0, &start, 1e-8, &[false, true, true, false]).unwrap();
        assert_eq!(out.values[3], 0.0);
        assert_eq!(out.values[4], 0.0);
        assert!(out.values[2] != 0.0 && out.values[5] != 0.0);
    }

    #[test]
    fn item_step_never_increases_objective() {
        let (data, grid, e) = setup(14);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let start = ItemParams::new(
                rng.random_range(0.2..3.0),
                rng.random_range(-2.0..2.0),
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let lambda = rng.random_range(0.0..0.05);
            let before = item_objective(&e, &data, &grid, 1, lambda, &start).unwrap().0;
            let out = m_step_item(&e, &data, &grid, 1, lambda, &start, 1e-6, &[false; 4]).unwrap();
            assert!(out.objective <= before);
        }
    }
}
