use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary item responses paired with person covariates, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_persons: usize,
    n_items: usize,
    n_covariates: usize,
    responses: Vec<u8>,
    covariates: Vec<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from row-major matrices.
    ///
    /// An empty item set is accepted so that the latent-only model can be
    /// evaluated; every other shape must be non-degenerate.
    pub fn new(
        n_persons: usize,
        n_items: usize,
        responses: Vec<u8>,
        covariates: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n_covariates = covariate_names.len();
        if n_persons == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one person".into()));
        }
        if responses.len() != n_persons * n_items {
            return Err(Error::DimensionMismatch(format!(
                "responses hold {} entries, expected {n_persons}x{n_items}",
                responses.len()
            )));
        }
        if covariates.len() != n_persons * n_covariates {
            return Err(Error::DimensionMismatch(format!(
                "covariates hold {} entries, expected {n_persons}x{n_covariates}",
                covariates.len()
            )));
        }
        if let Some(pos) = responses.iter().position(|&y| y > 1) {
            return Err(Error::InvalidArgument(format!(
                "response at person {}, item {} is {}, expected 0 or 1",
                pos / n_items,
                pos % n_items,
                responses[pos]
            )));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "covariate at person {}, column {} is not finite",
                pos / n_covariates,
                pos % n_covariates
            )));
        }
        Ok(Self { n_persons, n_items, n_covariates, responses, covariates, covariate_names })
    }

    /// Dataset with generic covariate names `x1..xK`.
    pub fn from_rows(responses: &[Vec<u8>], covariates: &[Vec<f64>]) -> Result<Self> {
        let n = responses.len();
        if covariates.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} response rows but {} covariate rows",
                covariates.len()
            )));
        }
        let j = responses.first().map_or(0, Vec::len);
        let k = covariates.first().map_or(0, Vec::len);
        if responses.iter().any(|r| r.len() != j) || covariates.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let names = (1..=k).map(|c| format!("x{c}")).collect();
        Self::new(n, j, responses.concat(), covariates.concat(), names)
    }

    #[inline]
    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    #[inline]
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    #[inline]
    pub fn responses_of(&self, person: usize) -> &[u8] {
        &self.responses[person * self.n_items..(person + 1) * self.n_items]
    }

    #[inline]
    pub fn covariates_of(&self, person: usize) -> &[f64] {
        &self.covariates[person * self.n_covariates..(person + 1) * self.n_covariates]
    }

    pub fn responses(&self) -> &[u8] {
        &self.responses
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_covariates {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} columns",
                names.len(),
                self.n_covariates
            )));
        }
        self.covariate_names = names;
        Ok(self)
    }

    /// Keeps only the listed item columns, in the given order.
    pub fn select_items(&self, items: &[usize]) -> Result<Self> {
        if let Some(&bad) = items.iter().find(|&&j| j >= self.n_items) {
            return Err(Error::InvalidArgument(format!("item index {bad} out of range")));
        }
        let mut responses = Vec::with_capacity(self.n_persons * items.len());
        for i in 0..self.n_persons {
            let row = self.responses_of(i);
            responses.extend(items.iter().map(|&j| row[j]));
        }
        Self::new(
            self.n_persons,
            items.len(),
            responses,
            self.covariates.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Endorsement rate of each item.
    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_items];
        for i in 0..self.n_persons {
            for (s, &y) in sums.iter_mut().zip(self.responses_of(i)) {
                *s += f64::from(y);
            }
        }
        sums.iter().map(|s| s / self.n_persons as f64).collect()
    }
}
