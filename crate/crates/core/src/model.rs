//! Response function, latent distribution and the quadrature-approximated
//! marginal likelihood with its first and second derivatives.
//!
//! All per-person quantities are accumulated in log space; products over
//! items become sums of `log f_j` and the integral over the latent trait is a
//! log-sum-exp over the person's adaptive quadrature nodes. Because the nodes
//! move with `(gamma, delta)`, derivatives with respect to the population
//! parameters include the chain rule through `theta_iq`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{dot, ItemParams, Layout, ParamVector, PopulationParams};
use crate::quadrature::{GaussHermiteRule, QuadratureGrid};

/// Persons per work unit. Fixed so that reductions do not depend on the
/// number of worker threads.
const CHUNK: usize = 128;

/// Finite-difference step for the Jacobian of the score.
pub const HESSIAN_STEP: f64 = 1e-5;

/// Probability of endorsing an item.
pub fn irf_probability(theta: f64, x: &[f64], item: &ItemParams) -> Result<f64> {
    if x.len() != item.n_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector has length {}, item expects {}",
            x.len(),
            item.n_covariates()
        )));
    }
    if !theta.is_finite() || !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("theta and covariates must be finite".into()));
    }
    let eta = item.intercept_at(x) + item.slope_at(x) * theta;
    if !eta.is_finite() {
        return Err(Error::InvalidArgument("linear predictor is not finite".into()));
    }
    Ok(logistic(eta))
}

/// Latent mean `gamma' x` and variance `exp(delta' x)`.
pub fn latent_moments(x: &[f64], pop: &PopulationParams) -> Result<(f64, f64)> {
    if x.len() != pop.n_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "covariate vector has length {}, population expects {}",
            x.len(),
            pop.n_covariates()
        )));
    }
    let lin = dot(&pop.logvar_effects, x);
    let var = lin.exp();
    if !var.is_finite() || var == 0.0 {
        return Err(Error::VarianceOverflow(lin));
    }
    Ok((dot(&pop.mean_effects, x), var))
}

#[inline]
pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `(p, log f(y))` for a Bernoulli response with logit `eta`.
#[inline]
pub(crate) fn bernoulli_logit(eta: f64, y: u8) -> (f64, f64) {
    let e = (-eta.abs()).exp();
    let l = e.ln_1p();
    let p = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    let logf = if y == 1 { -(l + (-eta).max(0.0)) } else { -(l + eta.max(0.0)) };
    (p, logf)
}

fn check_dims(layout: Layout, data: &Dataset) -> Result<()> {
    if layout.n_items != data.n_items() || layout.n_covariates != data.n_covariates() {
        return Err(Error::DimensionMismatch(format!(
            "parameters describe {} items x {} covariates, data has {} items x {} covariates",
            layout.n_items,
            layout.n_covariates,
            data.n_items(),
            data.n_covariates()
        )));
    }
    Ok(())
}

/// What the kernel should produce besides the log-likelihood.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Want {
    pub gradient: bool,
    pub per_person: bool,
    pub posterior: bool,
    pub hessian: bool,
}

/// Output of one pass over the data. Derivatives are of the loss
/// `-l_n`, i.e. the negative average log-likelihood.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub per_person: Vec<f64>,
    pub posterior: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// Per-person scratch buffers.
struct Scratch {
    theta: Vec<f64>,
    lw: Vec<f64>,
    post: Vec<f64>,
    p: Vec<f64>,
    alpha: Vec<f64>,
    slope: Vec<f64>,
    grad: Vec<f64>,
    slots: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Scratch {
    fn new(layout: Layout, q: usize, want: Want) -> Self {
        let j = layout.n_items;
        let s = 2 * j + 2;
        Self {
            theta: vec![0.0; q],
            lw: vec![0.0; q],
            post: vec![0.0; q],
            p: vec![0.0; q * j],
            alpha: vec![0.0; j],
            slope: vec![0.0; j],
            grad: vec![0.0; layout.dim()],
            slots: if want.hessian { vec![0.0; s * s] } else { Vec::new() },
            m: if want.hessian { vec![0.0; s] } else { Vec::new() },
            v: if want.hessian { vec![0.0; s] } else { Vec::new() },
        }
    }
}

/// Slot index and coefficient of each coordinate for one person.
///
/// Every derivative of `log g(theta_iq)` is `coef(c) * V[slot(c)]` for a
/// small per-node vector `V` of length `2J + 2`: slot `2j` carries the item's
/// intercept direction, `2j + 1` its slope direction, and the last two slots
/// the latent mean and log-variance directions.
fn slot_map(layout: Layout, x: &[f64], slot: &mut [usize], coef: &mut [f64]) {
    let k = layout.n_covariates;
    let j_items = layout.n_items;
    for j in 0..j_items {
        let o = layout.item_offset(j);
        slot[o] = 2 * j + 1;
        coef[o] = 1.0;
        slot[o + 1] = 2 * j;
        coef[o + 1] = 1.0;
        for c in 0..k {
            slot[o + 2 + c] = 2 * j;
            coef[o + 2 + c] = x[c];
            slot[o + 2 + k + c] = 2 * j + 1;
            coef[o + 2 + k + c] = x[c];
        }
    }
    let p = layout.population_offset();
    for c in 0..k {
        slot[p + c] = 2 * j_items;
        coef[p + c] = x[c];
        slot[p + k + c] = 2 * j_items + 1;
        coef[p + k + c] = x[c];
    }
}

/// One full pass of the marginal likelihood kernel.
pub(crate) fn run_pass(flat: &[f64], layout: Layout, data: &Dataset, grid: &QuadratureGrid, want: Want) -> Result<Pass> {
    check_dims(layout, data)?;
    if flat.len() != layout.dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has length {}, expected {}",
            flat.len(),
            layout.dim()
        )));
    }
    if grid.n_persons() != data.n_persons() {
        return Err(Error::DimensionMismatch(format!(
            "grid covers {} persons, data has {}",
            grid.n_persons(),
            data.n_persons()
        )));
    }
    let n = data.n_persons();
    let d = layout.dim();
    let q = grid.n_nodes();
    let want_grad = want.gradient || want.per_person || want.hessian;

    struct Partial {
        loglik: f64,
        gradient: Vec<f64>,
        per_person: Vec<f64>,
        posterior: Vec<f64>,
        hessian: Vec<f64>,
    }

    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let partials: Vec<Result<Partial>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut scratch = Scratch::new(layout, q, want);
            let mut part = Partial {
                loglik: 0.0,
                gradient: if want.gradient { vec![0.0; d] } else { Vec::new() },
                per_person: if want.per_person { Vec::with_capacity((end - start) * d) } else { Vec::new() },
                posterior: if want.posterior { Vec::with_capacity((end - start) * q) } else { Vec::new() },
                hessian: if want.hessian { vec![0.0; d * d] } else { Vec::new() },
            };
            let mut slot = vec![0usize; d];
            let mut coef = vec![0.0; d];
            for i in start..end {
                let ll = person_pass(flat, layout, data, grid, i, want_grad, want.hessian, &mut scratch)?;
                part.loglik += ll;
                if want.gradient {
                    for (g, s) in part.gradient.iter_mut().zip(&scratch.grad) {
                        *g -= s;
                    }
                }
                if want.per_person {
                    part.per_person.extend(scratch.grad.iter().map(|g| -g));
                }
                if want.posterior {
                    part.posterior.extend_from_slice(&scratch.post);
                }
                if want.hessian {
                    slot_map(layout, data.covariates_of(i), &mut slot, &mut coef);
                    let s_dim = 2 * layout.n_items + 2;
                    for a in 0..d {
                        let ca = coef[a];
                        if ca == 0.0 {
                            continue;
                        }
                        let row = &scratch.slots[slot[a] * s_dim..(slot[a] + 1) * s_dim];
                        let out = &mut part.hessian[a * d..(a + 1) * d];
                        for b in a..d {
                            out[b] -= ca * coef[b] * row[slot[b]];
                        }
                    }
                }
            }
            Ok(part)
        })
        .collect();

    let mut pass = Pass {
        loglik: 0.0,
        gradient: if want.gradient { vec![0.0; d] } else { Vec::new() },
        per_person: if want.per_person { Vec::with_capacity(n * d) } else { Vec::new() },
        posterior: if want.posterior { Vec::with_capacity(n * q) } else { Vec::new() },
        hessian: if want.hessian { vec![0.0; d * d] } else { Vec::new() },
    };
    for part in partials {
        let part = part?;
        pass.loglik += part.loglik;
        for (g, p) in pass.gradient.iter_mut().zip(&part.gradient) {
            *g += p;
        }
        pass.per_person.extend(part.per_person);
        pass.posterior.extend(part.posterior);
        for (h, p) in pass.hessian.iter_mut().zip(&part.hessian) {
            *h += p;
        }
    }
    let nf = n as f64;
    pass.loglik /= nf;
    for g in &mut pass.gradient {
        *g /= nf;
    }
    if want.hessian {
        for a in 0..d {
            for b in a..d {
                let v = pass.hessian[a * d + b] / nf;
                pass.hessian[a * d + b] = v;
                pass.hessian[b * d + a] = v;
            }
        }
    }
    Ok(pass)
}

/// Log marginal likelihood of one person; fills posterior weights, the
/// gradient of `log L_i` and, if requested, its Hessian in slot space.
#[allow(clippy::too_many_arguments)]
fn person_pass(
    flat: &[f64],
    layout: Layout,
    data: &Dataset,
    grid: &QuadratureGrid,
    i: usize,
    want_grad: bool,
    want_hessian: bool,
    s: &mut Scratch,
) -> Result<f64> {
    let j_items = layout.n_items;
    let k = layout.n_covariates;
    let q_nodes = grid.n_nodes();
    let x = data.covariates_of(i);
    let y = data.responses_of(i);

    for j in 0..j_items {
        let o = layout.item_offset(j);
        s.slope[j] = flat[o] + dot(&flat[o + 2 + k..o + 2 + 2 * k], x);
        s.alpha[j] = flat[o + 1] + dot(&flat[o + 2..o + 2 + k], x);
    }
    grid.nodes_into(i, &mut s.theta);
    let log_w = grid.log_weights();
    let mut max_lw = f64::NEG_INFINITY;
    for q in 0..q_nodes {
        let th = s.theta[q];
        let mut lg = log_w[q];
        let prow = &mut s.p[q * j_items..(q + 1) * j_items];
        for j in 0..j_items {
            let (p, lf) = bernoulli_logit(s.alpha[j] + s.slope[j] * th, y[j]);
            prow[j] = p;
            lg += lf;
        }
        s.lw[q] = lg;
        max_lw = max_lw.max(lg);
    }
    if !max_lw.is_finite() {
        return Err(Error::Underflow { person: i });
    }
    let mut total = 0.0;
    for q in 0..q_nodes {
        let e = (s.lw[q] - max_lw).exp();
        s.post[q] = e;
        total += e;
    }
    for e in &mut s.post {
        *e /= total;
    }
    let loglik = max_lw + total.ln();
    if !want_grad {
        return Ok(loglik);
    }

    let mu = grid.mean(i);
    s.grad.iter_mut().for_each(|g| *g = 0.0);
    let mut g0 = 0.0;
    let mut g1 = 0.0;
    for q in 0..q_nodes {
        let e = s.post[q];
        let th = s.theta[q];
        let prow = &s.p[q * j_items..(q + 1) * j_items];
        let mut dq = 0.0;
        for j in 0..j_items {
            let r = f64::from(y[j]) - prow[j];
            dq += r * s.slope[j];
            let er = e * r;
            let o = layout.item_offset(j);
            s.grad[o + 1] += er;
            s.grad[o] += er * th;
        }
        g0 += e * dq;
        g1 += e * dq * 0.5 * (th - mu);
    }
    for j in 0..j_items {
        let o = layout.item_offset(j);
        let (s1, s0) = (s.grad[o], s.grad[o + 1]);
        for c in 0..k {
            s.grad[o + 2 + c] = x[c] * s0;
            s.grad[o + 2 + k + c] = x[c] * s1;
        }
    }
    let p_off = layout.population_offset();
    for c in 0..k {
        s.grad[p_off + c] = x[c] * g0;
        s.grad[p_off + k + c] = x[c] * g1;
    }

    if want_hessian {
        person_hessian_slots(layout, data, i, mu, s);
    }
    Ok(loglik)
}

/// Hessian of `log L_i` in slot space:
/// `sum_q e_q (N_q + V_q V_q') - m m'` with `m = sum_q e_q V_q`.
fn person_hessian_slots(layout: Layout, data: &Dataset, i: usize, mu: f64, s: &mut Scratch) {
    let j_items = layout.n_items;
    let sd = 2 * j_items + 2;
    let (mu_slot, lv_slot) = (2 * j_items, 2 * j_items + 1);
    let y = data.responses_of(i);
    s.slots.iter_mut().for_each(|v| *v = 0.0);
    s.m.iter_mut().for_each(|v| *v = 0.0);
    let h = &mut s.slots;
    for q in 0..s.theta.len() {
        let e = s.post[q];
        if e < 1e-300 {
            continue;
        }
        let th = s.theta[q];
        let t2 = 0.5 * (th - mu);
        let prow = &s.p[q * j_items..(q + 1) * j_items];
        let mut dq = 0.0;
        let mut wbb = 0.0;
        for j in 0..j_items {
            let p = prow[j];
            let r = f64::from(y[j]) - p;
            let w = p * (1.0 - p);
            let b = s.slope[j];
            s.v[2 * j] = r;
            s.v[2 * j + 1] = r * th;
            dq += r * b;
            wbb += w * b * b;

            // curvature of log g, item-item and item-population parts
            let (c, t) = (2 * j, 2 * j + 1);
            h[c * sd + c] -= e * w;
            h[c * sd + t] -= e * w * th;
            h[t * sd + t] -= e * w * th * th;
            h[c * sd + mu_slot] -= e * w * b;
            h[c * sd + lv_slot] -= e * w * b * t2;
            h[t * sd + mu_slot] += e * (r - w * b * th);
            h[t * sd + lv_slot] += e * (r - w * b * th) * t2;
        }
        s.v[mu_slot] = dq;
        s.v[lv_slot] = dq * t2;
        h[mu_slot * sd + mu_slot] -= e * wbb;
        h[mu_slot * sd + lv_slot] -= e * wbb * t2;
        h[lv_slot * sd + lv_slot] += e * (-wbb * t2 * t2 + 0.5 * dq * t2);

        for a in 0..sd {
            let ea = e * s.v[a];
            s.m[a] += ea;
            let row = &mut h[a * sd..(a + 1) * sd];
            for b in a..sd {
                row[b] += ea * s.v[b];
            }
        }
    }
    for a in 0..sd {
        for b in a..sd {
            let v = h[a * sd + b] - s.m[a] * s.m[b];
            h[a * sd + b] = v;
            h[b * sd + a] = v;
        }
    }
}

/// Grid adapted to the population parameters inside `flat`.
pub(crate) fn grid_for(flat: &[f64], layout: Layout, data: &Dataset, rule: &GaussHermiteRule) -> Result<QuadratureGrid> {
    let k = layout.n_covariates;
    let p = layout.population_offset();
    let pop = PopulationParams::new(flat[p..p + k].to_vec(), flat[p + k..p + 2 * k].to_vec());
    QuadratureGrid::new(rule, &pop, data)
}

/// Average marginal log-likelihood `l_n`, with the quadrature grid adapted
/// to `params.population`.
pub fn marginal_loglik(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule) -> Result<f64> {
    let layout = params.layout();
    check_dims(layout, data)?;
    let grid = QuadratureGrid::new(rule, &params.population, data)?;
    marginal_loglik_on_grid(params, data, &grid)
}

/// Average marginal log-likelihood on an explicit grid.
pub fn marginal_loglik_on_grid(params: &ParamVector, data: &Dataset, grid: &QuadratureGrid) -> Result<f64> {
    let flat = params.flatten();
    Ok(run_pass(&flat, params.layout(), data, grid, Want::default())?.loglik)
}

/// Log marginal likelihood of every person, `log f(y_i | x_i)`.
pub fn person_logliks(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule) -> Result<Vec<f64>> {
    let layout = params.layout();
    check_dims(layout, data)?;
    let flat = params.flatten();
    let grid = QuadratureGrid::new(rule, &params.population, data)?;
    let mut scratch = Scratch::new(layout, grid.n_nodes(), Want::default());
    (0..data.n_persons())
        .map(|i| person_pass(&flat, layout, data, &grid, i, false, false, &mut scratch))
        .collect()
}

/// Gradient of the loss `-l_n` and the per-person gradient rows.
#[derive(Debug, Clone)]
pub struct Score {
    /// Length `d`.
    pub gradient: Vec<f64>,
    /// Row-major `n x d`; row `i` is the gradient of `-log f(y_i | x_i)`.
    pub per_person: Vec<f64>,
    pub n_persons: usize,
    pub dim: usize,
}

impl Score {
    pub fn row(&self, person: usize) -> &[f64] {
        &self.per_person[person * self.dim..(person + 1) * self.dim]
    }
}

/// Analytic gradient of the negative average log-likelihood.
pub fn score_vector(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule) -> Result<Score> {
    score_flat(&params.flatten(), params.layout(), data, rule)
}

pub(crate) fn score_flat(flat: &[f64], layout: Layout, data: &Dataset, rule: &GaussHermiteRule) -> Result<Score> {
    check_dims(layout, data)?;
    let grid = grid_for(flat, layout, data, rule)?;
    let pass = run_pass(flat, layout, data, &grid, Want { gradient: true, per_person: true, ..Want::default() })?;
    Ok(Score { gradient: pass.gradient, per_person: pass.per_person, n_persons: data.n_persons(), dim: layout.dim() })
}

/// `(l_n, gradient of -l_n)` without the per-person rows.
pub(crate) fn loglik_and_gradient(flat: &[f64], layout: Layout, data: &Dataset, rule: &GaussHermiteRule) -> Result<(f64, Vec<f64>)> {
    check_dims(layout, data)?;
    let grid = grid_for(flat, layout, data, rule)?;
    let pass = run_pass(flat, layout, data, &grid, Want { gradient: true, ..Want::default() })?;
    Ok((pass.loglik, pass.gradient))
}

/// Observed information: the Hessian of `-l_n`, obtained as the central
/// finite-difference Jacobian of the analytic score and symmetrized.
pub fn observed_information(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule) -> Result<DMatrix<f64>> {
    let layout = params.layout();
    check_dims(layout, data)?;
    let flat = params.flatten();
    let names = layout.names(data.covariate_names());
    let gradient = |x: &[f64]| loglik_and_gradient(x, layout, data, rule).map(|(_, g)| g);
    let h = fd_jacobian(&gradient, &flat, HESSIAN_STEP)?;
    finish_information(h, &names)
}

/// Observed information from the closed-form second derivatives.
///
/// Agrees with [`observed_information`] to finite-difference accuracy and
/// costs about as much as two gradient evaluations.
pub fn observed_information_analytic(params: &ParamVector, data: &Dataset, rule: &GaussHermiteRule) -> Result<DMatrix<f64>> {
    let layout = params.layout();
    check_dims(layout, data)?;
    information_flat(&params.flatten(), layout, data, rule)
}

pub(crate) fn information_flat(flat: &[f64], layout: Layout, data: &Dataset, rule: &GaussHermiteRule) -> Result<DMatrix<f64>> {
    let grid = grid_for(flat, layout, data, rule)?;
    let pass = run_pass(flat, layout, data, &grid, Want { hessian: true, ..Want::default() })?;
    let d = layout.dim();
    let h = DMatrix::from_row_slice(d, d, &pass.hessian);
    finish_information(h, &layout.names(data.covariate_names()))
}

/// Central-difference Jacobian of a vector field, one column per coordinate.
pub fn fd_jacobian<F>(f: &F, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let d = x.len();
    let columns: Vec<Result<Vec<f64>>> = (0..d)
        .into_par_iter()
        .map(|c| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += step;
            xm[c] -= step;
            let gp = f(&xp)?;
            let gm = f(&xm)?;
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        })
        .collect();
    let mut h = DMatrix::zeros(d, d);
    for (c, col) in columns.into_iter().enumerate() {
        let col = col?;
        if col.len() != d {
            return Err(Error::DimensionMismatch(format!("gradient has length {}, expected {d}", col.len())));
        }
        for (r, v) in col.into_iter().enumerate() {
            h[(r, c)] = v;
        }
    }
    Ok(h)
}

fn finish_information(mut h: DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    for r in 0..d {
        for c in 0..d {
            if !h[(r, c)].is_finite() {
                return Err(Error::NonFinite { coordinate: r, name: names[r].clone() });
            }
        }
    }
    let ht = h.transpose();
    h += ht;
    h *= 0.5;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::PopulationParams;
    use approx::assert_abs_diff_eq;

    fn table2_item1() -> ItemParams {
        ItemParams::new(2.0, 0.0, vec![0.2, -0.5, -0.2], vec![0.2, 0.5, 0.2])
    }

    #[test]
    fn logistic_at_zero() {
        let item = ItemParams::without_dif(2.0, 0.0, 3);
        assert_eq!(irf_probability(0.0, &[0.0; 3], &item).unwrap(), 0.5);
    }

    #[test]
    fn item_one_reference_group() {
        // 1 / (1 + e^-2)
        let p = irf_probability(1.0, &[0.0; 3], &table2_item1()).unwrap();
        assert_abs_diff_eq!(p, 0.880_797_077_977_882_3, epsilon = 1e-12);
    }

    #[test]
    fn item_one_with_gender() {
        // logistic(0 - 0.5 + 2.5 * 0.5) = logistic(0.75)
        let p = irf_probability(0.5, &[0.0, 1.0, 0.0], &table2_item1()).unwrap();
        assert_abs_diff_eq!(p, 0.679_178_699_175_393_1, epsilon = 1e-12);
    }

    #[test]
    fn irf_rejects_non_finite_and_bad_length() {
        let item = table2_item1();
        assert!(irf_probability(f64::NAN, &[0.0; 3], &item).is_err());
        assert!(irf_probability(0.0, &[0.0; 2], &item).is_err());
        assert!(irf_probability(0.0, &[f64::INFINITY, 0.0, 0.0], &item).is_err());
    }

    #[test]
    fn irf_stays_inside_unit_interval() {
        let item = ItemParams::without_dif(50.0, 0.0, 0);
        let hi = irf_probability(30.0, &[], &item).unwrap();
        let lo = irf_probability(-30.0, &[], &item).unwrap();
        assert!(hi <= 1.0 && lo >= 0.0);
        let mid = irf_probability(0.3, &[], &ItemParams::without_dif(1.0, 0.0, 0)).unwrap();
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn latent_moments_examples() {
        let pop = PopulationParams::new(vec![-0.2; 3], vec![-0.1, 0.3, 0.1]);
        assert_eq!(latent_moments(&[0.0; 3], &pop).unwrap(), (0.0, 1.0));
        let (m, v) = latent_moments(&[1.0, 0.0, 0.0], &pop).unwrap();
        assert_abs_diff_eq!(m, -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.904_837_418_035_959_6, epsilon = 1e-14);
        let (m, v) = latent_moments(&[1.0, 1.0, 1.0], &pop).unwrap();
        assert_abs_diff_eq!(m, -0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 1.349_858_807_576_003_1, epsilon = 1e-13);
    }

    #[test]
    fn latent_variance_overflow_is_reported() {
        let pop = PopulationParams::new(vec![0.0], vec![1000.0]);
        match latent_moments(&[1.0], &pop) {
            Err(Error::VarianceOverflow(v)) => assert_eq!(v, 1000.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bernoulli_logit_matches_direct_formula() {
        for &eta in &[-30.0, -3.0, -0.2, 0.0, 0.7, 4.0, 25.0] {
            let p = 1.0 / (1.0 + f64::exp(-eta));
            let (pp, l1) = bernoulli_logit(eta, 1);
            let (_, l0) = bernoulli_logit(eta, 0);
            assert_abs_diff_eq!(pp, p, epsilon = 1e-15);
            assert_abs_diff_eq!(l1, p.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(l0, -eta.exp().ln_1p(), epsilon = 1e-12);
        }
    }

    #[test]
    fn slope_free_item_integrates_out() {
        let item = ItemParams::without_dif(0.0, 0.8, 1);
        let params = ParamVector::new(vec![item], PopulationParams::new(vec![0.3], vec![0.2])).unwrap();
        let ys = [1u8, 0, 1, 1, 0];
        let xs = [0.1, -1.0, 2.0, 0.0, 0.5];
        let data = Dataset::from_rows(&ys.map(|y| vec![y]), &xs.map(|x| vec![x])).unwrap();
        let rule = GaussHermiteRule::new(21).unwrap();
        let ll = marginal_loglik(&params, &data, &rule).unwrap();
        let p = logistic(0.8);
        let expect: f64 = ys.iter().map(|&y| if y == 1 { p.ln() } else { (1.0 - p).ln() }).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(ll, expect, epsilon = 1e-12);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let params = ParamVector::default_start(2, 1);
        let data = Dataset::from_rows(&[vec![1, 0, 1]], &[vec![0.0]]).unwrap();
        let rule = GaussHermiteRule::new(5).unwrap();
        assert!(matches!(marginal_loglik(&params, &data, &rule), Err(Error::DimensionMismatch(_))));
        assert!(matches!(score_vector(&params, &data, &rule), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn jacobian_of_quadratic_gradient_is_exact() {
        // loss 0.5 x'Ax + b'x has gradient Ax + b and Hessian A
        let a = [[4.0, 1.0, -0.5], [1.0, 3.0, 0.25], [-0.5, 0.25, 2.0]];
        let grad = |x: &[f64]| -> Result<Vec<f64>> {
            Ok((0..3).map(|r| (0..3).map(|c| a[r][c] * x[c]).sum::<f64>() + r as f64).collect())
        };
        let h = fd_jacobian(&grad, &[0.3, -1.2, 2.0], HESSIAN_STEP).unwrap();
        let h = finish_information(h, &["a".into(), "b".into(), "c".into()]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(h[(r, c)], a[r][c], epsilon = 1e-8);
                assert_eq!(h[(r, c)], h[(c, r)]);
            }
        }
    }
}
