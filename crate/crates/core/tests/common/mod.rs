#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use nalgebra::{DMatrix, DVector};
use regdif_core::inference::submatrix;
use regdif_core::model::{marginal_loglik, person_logliks, score_vector};
use regdif_core::simulation::{generate_dataset, generate_responses_with, DifCondition, TrueModel};
use regdif_core::{Dataset, GaussHermiteRule, InferenceContext, ItemParams, Layout, ParamVector, PopulationParams};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn covariate_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("x{}", c + 1)).collect()
}

/// Parameters in a moderate range: slopes in (0.5, 2), small DIF and
/// population effects.
pub fn random_params(rng: &mut ChaCha20Rng, j: usize, k: usize) -> ParamVector {
    let items = (0..j)
        .map(|_| {
            ItemParams::new(
                rng.random_range(0.5..2.0),
                rng.random_range(-1.0..1.0),
                (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..k).map(|_| rng.random_range(-0.3..0.3)).collect(),
            )
        })
        .collect();
    let pop = PopulationParams::new(
        (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
        (0..k).map(|_| rng.random_range(-0.4..0.4)).collect(),
    );
    ParamVector::new(items, pop).unwrap()
}

/// Covariates: a continuous column followed by binary columns.
pub fn random_covariates(rng: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<f64> {
    (0..n * k)
        .map(|idx| if idx % k == 0 { rng.random_range(-1.0..1.0) } else { f64::from(rng.random_bool(0.5) as u8) })
        .collect()
}

/// Dataset drawn from `params` with random covariates.
pub fn simulate(rng: &mut ChaCha20Rng, params: &ParamVector, n: usize) -> Dataset {
    let k = params.population.n_covariates();
    let j = params.items.len();
    let x = random_covariates(rng, n, k);
    let y = if k == 0 {
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut y = Vec::with_capacity(n * j);
        for _ in 0..n {
            let theta: f64 = rng.sample(normal);
            for item in &params.items {
                let p = 1.0 / (1.0 + (-(item.intercept + item.slope * theta)).exp());
                y.push(u8::from(rng.random::<f64>() < p));
            }
        }
        y
    } else {
        generate_responses_with(&x, params, rng).unwrap().0
    };
    Dataset::new(n, j, y, x, covariate_names(k)).unwrap()
}

pub fn table2(n: usize, condition: DifCondition, seed: u64) -> Dataset {
    generate_dataset(n, &TrueModel::new(condition), &mut rng(seed)).unwrap()
}

struct Smooth<F>(F);

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> argmin::core::CostFunction for Smooth<F> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok((self.0)(x).0)
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> argmin::core::Gradient for Smooth<F> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, x: &Vec<f64>) -> Result<Vec<f64>, argmin::core::Error> {
        Ok((self.0)(x).1)
    }
}

/// Minimizes a smooth function with argmin's L-BFGS and a More-Thuente
/// line search. `f` returns the value and gradient. Returns the minimizer
/// and the value there.
pub fn lbfgs_minimize(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x0: &[f64], grad_tol: f64) -> (Vec<f64>, f64) {
    use argmin::core::{Executor, State};
    use argmin::solver::linesearch::MoreThuenteLineSearch;
    use argmin::solver::quasinewton::LBFGS;
    let solver = LBFGS::new(MoreThuenteLineSearch::new().with_bounds(1e-12, 20.0).unwrap(), 10)
        .with_tolerance_grad(grad_tol)
        .unwrap();
    let res = Executor::new(Smooth(f), solver)
        .configure(|s| s.param(x0.to_vec()).max_iters(10_000))
        .run()
        .unwrap();
    let state = res.state();
    (state.get_best_param().unwrap().clone(), state.get_best_cost())
}

/// Posterior weights and grid at the truth of a random model, the input
/// of one item M-step.
pub fn mstep_setup(seed: u64, j: usize, k: usize, n: usize) -> (Dataset, regdif_core::QuadratureGrid, regdif_core::em::PosteriorWeights) {
    let mut r = rng(seed);
    let params = random_params(&mut r, j, k);
    let data = simulate(&mut r, &params, n);
    let grid = regdif_core::em::grid_for_params(&params, &data, 49).unwrap();
    let e = regdif_core::em::posterior_weights(&params, &data, &grid).unwrap();
    (data, grid, e)
}

/// Worst objective gap between `m_step_item` with lambda = 0 and L-BFGS on
/// the same weighted objective, over every item of one setup.
pub fn item_step_optimizer_gap(seed: u64, j: usize, k: usize) -> f64 {
    use regdif_core::em::{item_objective, m_step_item};
    let (data, grid, e) = mstep_setup(seed, j, k, 300);
    let mut worst = 0.0f64;
    for item in 0..j {
        let start = ItemParams::without_dif(1.0, 0.0, k);
        let step = m_step_item(&e, &data, &grid, item, 0.0, &start, 1e-6, &vec![false; 2 * k]).unwrap();
        let f = |v: &[f64]| {
            let p = ItemParams::new(v[0], v[1], v[2..2 + k].to_vec(), v[2 + k..].to_vec());
            item_objective(&e, &data, &grid, item, 0.0, &p).unwrap()
        };
        let mut x0 = vec![1.0, 0.0];
        x0.extend(vec![0.0; 2 * k]);
        let (_, value) = lbfgs_minimize(f, &x0, 1e-8);
        worst = worst.max((step.objective - value).abs());
    }
    worst
}

/// Worst subgradient KKT violation of `m_step_item` with penalty `lambda`,
/// measured as the excess over `lambda` of the distance from `-grad` to the
/// subdifferential of `lambda |b|` plus `lambda`. A value at most
/// `lambda + 1e-6` passes.
pub fn item_step_kkt_residual(seed: u64, j: usize, k: usize, lambda: f64) -> f64 {
    use regdif_core::em::{item_objective, m_step_item};
    let (data, grid, e) = mstep_setup(seed, j, k, 300);
    let mut worst = 0.0f64;
    for item in 0..j {
        let start = ItemParams::without_dif(1.0, 0.0, k);
        let step = m_step_item(&e, &data, &grid, item, lambda, &start, 1e-6, &vec![false; 2 * k]).unwrap();
        let (_, g) = item_objective(&e, &data, &grid, item, 0.0, &step.params()).unwrap();
        worst = worst.max(g[0].abs()).max(g[1].abs());
        for c in 2..2 + 2 * k {
            let b = step.values[c];
            let r = if b == 0.0 { g[c].abs() } else { lambda + (g[c] + lambda * b.signum()).abs() };
            worst = worst.max(r);
        }
    }
    worst
}

pub fn loss_at(flat: &[f64], layout: Layout, data: &Dataset, rule: &GaussHermiteRule) -> f64 {
    -marginal_loglik(&ParamVector::from_flat(layout, flat).unwrap(), data, rule).unwrap()
}

/// Central differences of `-l_n`.
pub fn fd_gradient(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule, h: f64) -> Vec<f64> {
    let layout = params.layout();
    let x = params.flatten();
    (0..x.len())
        .map(|c| {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[c] += h;
            dn[c] -= h;
            (loss_at(&up, layout, data, rule) - loss_at(&dn, layout, data, rule)) / (2.0 * h)
        })
        .collect()
}

pub fn normal_pdf(t: f64, mu: f64, sd: f64) -> f64 {
    let z = (t - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// `f(y_i | x_i)` by a 10,001-point trapezoid rule on `mu +- 8 sd`, using
/// its own response function.
pub fn trapezoid_likelihood(params: &ParamVector, y: &[u8], x: &[f64]) -> f64 {
    let dot = |a: &[f64]| a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>();
    let mu = dot(&params.population.mean_effects);
    let sd = dot(&params.population.logvar_effects).exp().sqrt();
    let m = 10_000;
    let (lo, hi) = (mu - 8.0 * sd, mu + 8.0 * sd);
    let h = (hi - lo) / m as f64;
    let integrand = |t: f64| {
        let mut f = normal_pdf(t, mu, sd);
        for (item, &yj) in params.items.iter().zip(y) {
            let eta = item.intercept + dot(&item.d_dif) + (item.slope + dot(&item.a_dif)) * t;
            let p = 1.0 / (1.0 + (-eta).exp());
            f *= if yj == 1 { p } else { 1.0 - p };
        }
        f
    };
    let inner: f64 = (1..m).map(|k| integrand(lo + k as f64 * h)).sum();
    h * (inner + 0.5 * (integrand(lo) + integrand(hi)))
}

/// Largest absolute likelihood error over the persons of `data`.
pub fn worst_quadrature_error(params: &ParamVector, data: &Dataset, q: usize) -> f64 {
    let logliks = person_logliks(params, data, &GaussHermiteRule::new(q).unwrap()).unwrap();
    (0..data.n_persons())
        .map(|i| (logliks[i].exp() - trapezoid_likelihood(params, data.responses_of(i), data.covariates_of(i))).abs())
        .fold(0.0, f64::max)
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().lu().try_inverse().expect("invertible")
}

/// `T = n s' (H_pp - H_pe H_ee^-1 H_ep)^-1 s` with
/// `s = g_p - H_pe H_ee^-1 g_e` at `(psi = 0, eta_hat)`.
pub fn classical_score_statistic(ctx: &InferenceContext, data: &Dataset, fixed: &[bool], focal: &[usize]) -> f64 {
    let layout = ctx.layout();
    let nuisance: Vec<usize> = (0..layout.dim()).filter(|&c| !focal.contains(&c) && !fixed[c]).collect();
    let h = ctx.hessian();
    let h_pp = submatrix(h, focal, focal);
    let h_pe = submatrix(h, focal, &nuisance);
    let h_ee_inv = inverse(&submatrix(h, &nuisance, &nuisance));
    let mut null = ctx.estimate().to_vec();
    for &c in focal {
        null[c] = 0.0;
    }
    let g = score_vector(&ParamVector::from_flat(layout, &null).unwrap(), data, &GaussHermiteRule::new(49).unwrap()).unwrap().gradient;
    let g_p = DVector::from_iterator(focal.len(), focal.iter().map(|&c| g[c]));
    let g_e = DVector::from_iterator(nuisance.len(), nuisance.iter().map(|&c| g[c]));
    let s = &g_p - &h_pe * &h_ee_inv * g_e;
    let schur = &h_pp - &h_pe * &h_ee_inv * h_pe.transpose();
    data.n_persons() as f64 * (s.transpose() * inverse(&schur) * &s)[(0, 0)]
}
