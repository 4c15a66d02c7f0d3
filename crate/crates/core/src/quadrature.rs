//! Gauss-Hermite rules and the per-person adaptive latent grid.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::latent_moments;
use crate::params::PopulationParams;

/// Physicists' Gauss-Hermite rule: `int f(z) exp(-z^2) dz ~ sum_q v_q f(z_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermiteRule {
    /// Nodes from the Golub-Welsch eigenproblem, polished by Newton steps on
    /// the orthonormal Hermite recurrence, which also yields the weights.
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidArgument("quadrature size must be at least 1".into()));
        }
        let mut jacobi = DMatrix::<f64>::zeros(q, q);
        for i in 0..q - 1 {
            let off = ((i + 1) as f64 / 2.0).sqrt();
            jacobi[(i, i + 1)] = off;
            jacobi[(i + 1, i)] = off;
        }
        let mut guesses: Vec<f64> = jacobi.symmetric_eigen().eigenvalues.iter().copied().collect();
        guesses.sort_by(f64::total_cmp);

        let mut nodes = Vec::with_capacity(q);
        let mut weights = Vec::with_capacity(q);
        for &start in &guesses {
            let mut z = start;
            let mut converged = false;
            let mut deriv = 0.0;
            for _ in 0..100 {
                let (p, pm1) = orthonormal_hermite(q, z);
                deriv = (2.0 * q as f64).sqrt() * pm1;
                let step = p / deriv;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    let (_, pm1) = orthonormal_hermite(q, z);
                    deriv = (2.0 * q as f64).sqrt() * pm1;
                    converged = true;
                    break;
                }
            }
            if !converged || !z.is_finite() || !deriv.is_finite() || deriv == 0.0 {
                return Err(Error::Quadrature(q));
            }
            nodes.push(z);
            weights.push(2.0 / (deriv * deriv));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Quadrature(q));
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Orthonormal Hermite polynomial values `(p_q(z), p_{q-1}(z))`.
fn orthonormal_hermite(q: usize, z: f64) -> (f64, f64) {
    let mut p_prev = 0.0;
    let mut p = std::f64::consts::PI.powf(-0.25);
    for j in 1..=q {
        let jf = j as f64;
        let next = z * (2.0 / jf).sqrt() * p - ((jf - 1.0) / jf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// Gauss-Hermite grid transformed to each person's latent normal:
/// `theta_iq = mu_i + sqrt(2) sigma_i z_q` with weights `v_q / sqrt(pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    standard_nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl QuadratureGrid {
    /// Grid for the persons of `data` under `population`.
    pub fn new(rule: &GaussHermiteRule, population: &PopulationParams, data: &Dataset) -> Result<Self> {
        if population.n_covariates() != data.n_covariates() {
            return Err(Error::DimensionMismatch(format!(
                "population has {} covariate effects, data has {} covariates",
                population.n_covariates(),
                data.n_covariates()
            )));
        }
        let n = data.n_persons();
        let mut means = Vec::with_capacity(n);
        let mut sds = Vec::with_capacity(n);
        for i in 0..n {
            let (mu, var) = latent_moments(data.covariates_of(i), population)?;
            means.push(mu);
            sds.push(var.sqrt());
        }
        let total: f64 = rule.weights.iter().sum();
        let weights: Vec<f64> = rule.weights.iter().map(|v| v / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { standard_nodes: rule.nodes.clone(), weights, log_weights, means, sds })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.standard_nodes.len()
    }

    #[inline]
    pub fn n_persons(&self) -> usize {
        self.means.len()
    }

    #[inline]
    pub fn standard_nodes(&self) -> &[f64] {
        &self.standard_nodes
    }

    /// Normalized weights, identical for every person.
    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    #[inline]
    pub fn mean(&self, person: usize) -> f64 {
        self.means[person]
    }

    #[inline]
    pub fn sd(&self, person: usize) -> f64 {
        self.sds[person]
    }

    #[inline]
    pub fn node(&self, person: usize, q: usize) -> f64 {
        self.means[person] + std::f64::consts::SQRT_2 * self.sds[person] * self.standard_nodes[q]
    }

    /// Writes the nodes of one person into `out`.
    #[inline]
    pub fn nodes_into(&self, person: usize, out: &mut [f64]) {
        let mu = self.means[person];
        let scale = std::f64::consts::SQRT_2 * self.sds[person];
        for (o, z) in out.iter_mut().zip(&self.standard_nodes) {
            *o = mu + scale * z;
        }
    }
}

/// Builds the rule and the adaptive grid in one call.
pub fn build_quadrature(q: usize, population: &PopulationParams, data: &Dataset) -> Result<QuadratureGrid> {
    let rule = GaussHermiteRule::new(q)?;
    QuadratureGrid::new(&rule, population, data)
}
