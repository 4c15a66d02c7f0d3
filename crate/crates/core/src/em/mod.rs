//! Penalized Bock-Aitkin EM for the MNLFA model.
//!
//! Minimizes `p_n = -l_n + lambda * sum_j ||beta_j||_1` where the penalty
//! covers the d-DIF and a-DIF effects of every item. With `lambda = 0` and a
//! fixed-zero mask on some DIF coordinates the same routine is the ordinary
//! marginal ML fit of a constrained (anchored) model.

mod estep;
mod mstep;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{grid_for, run_pass, Want};
use crate::params::{Layout, ParamVector};
use crate::quadrature::{GaussHermiteRule, QuadratureGrid};

pub use estep::{posterior_weights, PosteriorWeights};
pub use mstep::{item_objective, m_step_item, m_step_population, soft_threshold, ItemStep, PopulationStep};
pub(crate) use mstep::{item_step_on_records, population_step_on_records, Records};

/// Bound on `|a_j|` and `|d_j|`; items with all-equal responses would
/// otherwise drift to infinity.
pub const ITEM_BOUND: f64 = 10.0;

/// Cap on outer (Newton / IRLS) iterations of one item M-step.
pub const MAX_IRLS: usize = 50;

/// L1 penalty weight and the coordinate masks it acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    /// True on coordinates that carry the L1 penalty.
    pub penalized_mask: Vec<bool>,
    /// True on coordinates held at exactly zero.
    pub fixed_zero_mask: Vec<bool>,
}

impl PenaltyConfig {
    /// L1 penalty on every DIF coordinate.
    pub fn lasso(layout: Layout, lambda: f64) -> Self {
        Self { lambda, penalized_mask: layout.dif_mask(), fixed_zero_mask: vec![false; layout.dim()] }
    }

    /// Unpenalized fit of the full model.
    pub fn unpenalized(layout: Layout) -> Self {
        Self { lambda: 0.0, penalized_mask: vec![false; layout.dim()], fixed_zero_mask: vec![false; layout.dim()] }
    }

    /// Unpenalized fit with the DIF effects of `anchors` (0-based) fixed at zero.
    pub fn anchored(layout: Layout, anchors: &[usize]) -> Self {
        let mut fixed = vec![false; layout.dim()];
        for &j in anchors {
            for c in layout.dif_block(j) {
                fixed[c] = true;
            }
        }
        Self { lambda: 0.0, penalized_mask: vec![false; layout.dim()], fixed_zero_mask: fixed }
    }

    /// Unpenalized fit with an arbitrary fixed-zero mask.
    pub fn constrained(layout: Layout, fixed_zero_mask: Vec<bool>) -> Self {
        Self { lambda: 0.0, penalized_mask: vec![false; layout.dim()], fixed_zero_mask }
    }

    /// Adds fixed-zero coordinates, removing them from the penalized set.
    pub fn with_fixed_zero(mut self, coords: &[usize]) -> Self {
        for &c in coords {
            self.fixed_zero_mask[c] = true;
            self.penalized_mask[c] = false;
        }
        self
    }

    pub fn validate(&self, layout: Layout) -> Result<()> {
        let d = layout.dim();
        if self.penalized_mask.len() != d || self.fixed_zero_mask.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "penalty masks have lengths {} and {}, model dimension is {d}",
                self.penalized_mask.len(),
                self.fixed_zero_mask.len()
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        for c in 0..d {
            if self.penalized_mask[c] && !layout.is_dif(c) {
                return Err(Error::InvalidArgument(format!("coordinate {c} is not a DIF effect and cannot be penalized")));
            }
            if self.penalized_mask[c] && self.fixed_zero_mask[c] {
                return Err(Error::InvalidArgument(format!("coordinate {c} is both penalized and fixed at zero")));
            }
            if self.fixed_zero_mask[c] && !layout.is_dif(c) {
                return Err(Error::InvalidArgument(format!("coordinate {c} is not a DIF effect and cannot be fixed at zero")));
            }
        }
        Ok(())
    }

    /// `lambda * sum of |xi_c|` over penalized coordinates.
    pub fn penalty_value(&self, flat: &[f64]) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        self.lambda * flat.iter().zip(&self.penalized_mask).filter(|(_, &m)| m).map(|(v, _)| v.abs()).sum::<f64>()
    }

    pub fn free_coordinates(&self) -> Vec<usize> {
        (0..self.fixed_zero_mask.len()).filter(|&c| !self.fixed_zero_mask[c]).collect()
    }
}

/// Iteration control for the EM algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when the penalized loss changes by less than this.
    pub em_tol: f64,
    /// Coordinate-change tolerance inside the M-steps.
    pub mstep_tol: f64,
    pub quadrature_q: usize,
    /// Starting values; `None` means the neutral default start.
    pub start: Option<ParamVector>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iter: 500, em_tol: 1e-4, mstep_tol: 1e-6, quadrature_q: 49, start: None }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.em_tol > 0.0 && self.mstep_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.quadrature_q == 0 {
            return Err(Error::InvalidArgument("quadrature size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Warnings raised during a fit; none of them abort it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitFlags {
    /// Items whose slope or intercept hit the `ITEM_BOUND` clamp (0-based).
    pub clamped_items: Vec<usize>,
    /// Item M-steps that hit the iteration cap or could not decrease.
    pub item_step_warnings: usize,
    /// Population M-steps that did not reach the gradient tolerance.
    pub population_step_warnings: usize,
}

/// Output of [`penalized_em_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimate: ParamVector,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized loss `p_n` at the start and after every EM iteration.
    pub trace: Vec<f64>,
    pub final_loss: f64,
    pub penalty: PenaltyConfig,
    pub quadrature_q: usize,
    pub flags: FitFlags,
}

impl FitResult {
    pub fn layout(&self) -> Layout {
        self.estimate.layout()
    }

    /// Items with at least one nonzero DIF effect (0-based).
    pub fn selected_items(&self) -> Vec<usize> {
        (0..self.estimate.items.len()).filter(|&j| self.estimate.items[j].has_dif()).collect()
    }
}

/// `c * sqrt(1 / n)`.
pub fn select_lambda(n: usize, c: f64) -> Result<f64> {
    if n == 0 || !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("need n >= 1 and c > 0, got n = {n}, c = {c}")));
    }
    Ok(c * (1.0 / n as f64).sqrt())
}

/// Penalized loss `-l_n + lambda ||beta||_1` with the grid adapted to `params`.
pub fn penalized_loss(params: &ParamVector, data: &Dataset, penalty: &PenaltyConfig, rule: &GaussHermiteRule) -> Result<f64> {
    let flat = params.flatten();
    let grid = grid_for(&flat, params.layout(), data, rule)?;
    let ll = run_pass(&flat, params.layout(), data, &grid, Want::default())?.loglik;
    Ok(-ll + penalty.penalty_value(&flat))
}

/// Fits the model by alternating E-steps and penalized M-steps.
pub fn penalized_em_fit(data: &Dataset, penalty: &PenaltyConfig, config: &EmConfig) -> Result<FitResult> {
    config.validate()?;
    let layout = Layout::new(data.n_items(), data.n_covariates());
    penalty.validate(layout)?;
    let start = match &config.start {
        Some(s) => {
            if s.layout() != layout {
                return Err(Error::DimensionMismatch(format!(
                    "start values describe {} items x {} covariates, data has {} x {}",
                    s.layout().n_items,
                    s.layout().n_covariates,
                    layout.n_items,
                    layout.n_covariates
                )));
            }
            s.clone()
        }
        None => ParamVector::default_start(layout.n_items, layout.n_covariates),
    };
    let rule = GaussHermiteRule::new(config.quadrature_q)?;
    let mut flat = start.flatten();
    for (v, &fixed) in flat.iter_mut().zip(&penalty.fixed_zero_mask) {
        if fixed {
            *v = 0.0;
        }
    }

    let per_item = layout.per_item();
    let k = layout.n_covariates;
    let mut trace = Vec::new();
    let mut flags = FitFlags::default();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let grid = grid_for(&flat, layout, data, &rule)?;
        let pass = run_pass(&flat, layout, data, &grid, Want { posterior: true, ..Want::default() })?;
        let loss = -pass.loglik + penalty.penalty_value(&flat);
        trace.push(loss);
        let len = trace.len();
        if len >= 2 && (trace[len - 1] - trace[len - 2]).abs() < config.em_tol {
            converged = true;
            break;
        }
        if iterations >= config.max_iter {
            break;
        }

        let records = Records::new(&pass.posterior, &grid, data.n_persons());
        if k > 0 {
            let p = layout.population_offset();
            let pop = population_step_on_records(&records, data, &flat[p..], config.mstep_tol);
            if !pop.converged {
                flags.population_step_warnings += 1;
            }
            flat[p..].copy_from_slice(&pop.values);
        }
        let steps: Vec<ItemStep> = (0..layout.n_items)
            .into_par_iter()
            .map(|j| {
                let o = layout.item_offset(j);
                item_step_on_records(
                    &records,
                    data,
                    j,
                    penalty.lambda,
                    &flat[o..o + per_item],
                    &penalty.penalized_mask[o..o + per_item],
                    &penalty.fixed_zero_mask[o..o + per_item],
                    config.mstep_tol,
                )
            })
            .collect();
        for (j, step) in steps.into_iter().enumerate() {
            if !step.converged {
                flags.item_step_warnings += 1;
            }
            let o = layout.item_offset(j);
            flat[o..o + per_item].copy_from_slice(&step.values);
            let mut clamped = false;
            for c in [o, o + 1] {
                if flat[c].abs() > ITEM_BOUND {
                    flat[c] = flat[c].clamp(-ITEM_BOUND, ITEM_BOUND);
                    clamped = true;
                }
            }
            if clamped && !flags.clamped_items.contains(&j) {
                log::warn!("item {} slope/intercept clamped to +-{ITEM_BOUND}", j + 1);
                flags.clamped_items.push(j);
            }
        }
        iterations += 1;
    }

    let estimate = ParamVector::from_flat(layout, &flat)?;
    let final_loss = *trace.last().expect("trace holds the starting loss");
    Ok(FitResult {
        estimate,
        lambda: penalty.lambda,
        iterations,
        converged,
        trace,
        final_loss,
        penalty: penalty.clone(),
        quadrature_q: config.quadrature_q,
        flags,
    })
}

/// Grid for `params` on `data` using a `q`-point rule.
pub fn grid_for_params(params: &ParamVector, data: &Dataset, q: usize) -> Result<QuadratureGrid> {
    crate::quadrature::build_quadrature(q, &params.population, data)
}
