use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{run_pass, Want};
use crate::params::ParamVector;
use crate::quadrature::QuadratureGrid;

/// Row-stochastic `n x Q` matrix of posterior node weights `e_iq`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    n_persons: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl PosteriorWeights {
    pub fn from_rows(n_persons: usize, n_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_persons * n_nodes {
            return Err(Error::DimensionMismatch(format!(
                "{} posterior entries for {n_persons}x{n_nodes}",
                values.len()
            )));
        }
        Ok(Self { n_persons, n_nodes, values })
    }

    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, person: usize) -> &[f64] {
        &self.values[person * self.n_nodes..(person + 1) * self.n_nodes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Posterior probability of each grid node for each person, computed in
/// log space.
pub fn posterior_weights(params: &ParamVector, data: &Dataset, grid: &QuadratureGrid) -> Result<PosteriorWeights> {
    let pass = run_pass(&params.flatten(), params.layout(), data, grid, Want { posterior: true, ..Want::default() })?;
    PosteriorWeights::from_rows(data.n_persons(), grid.n_nodes(), pass.posterior)
}
