//! Parameter containers and the fixed flattening order.
//!
//! The flat vector is laid out as
//! `(a_1, d_1, beta0_1, beta1_1, ..., a_J, d_J, beta0_J, beta1_J, gamma, delta)`
//! where each `beta` block and both population blocks have length `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope, intercept and covariate effects (DIF) for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub slope: f64,
    pub intercept: f64,
    /// Covariate effects on the intercept (d-DIF).
    pub d_dif: Vec<f64>,
    /// Covariate effects on the slope (a-DIF).
    pub a_dif: Vec<f64>,
}

impl ItemParams {
    pub fn new(slope: f64, intercept: f64, d_dif: Vec<f64>, a_dif: Vec<f64>) -> Self {
        Self { slope, intercept, d_dif, a_dif }
    }

    /// A DIF-free item with `k` covariates.
    pub fn without_dif(slope: f64, intercept: f64, k: usize) -> Self {
        Self::new(slope, intercept, vec![0.0; k], vec![0.0; k])
    }

    pub fn n_covariates(&self) -> usize {
        self.d_dif.len()
    }

    pub fn has_dif(&self) -> bool {
        self.d_dif.iter().chain(&self.a_dif).any(|&b| b != 0.0)
    }

    /// Intercept function `d + beta0' x`.
    #[inline]
    pub fn intercept_at(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.d_dif, x)
    }

    /// Slope function `a + beta1' x`.
    #[inline]
    pub fn slope_at(&self, x: &[f64]) -> f64 {
        self.slope + dot(&self.a_dif, x)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.d_dif.len() != k || self.a_dif.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "item DIF blocks have lengths {} and {}, expected {k}",
                self.d_dif.len(),
                self.a_dif.len()
            )));
        }
        let finite = [self.slope, self.intercept]
            .iter()
            .chain(&self.d_dif)
            .chain(&self.a_dif)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("item parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Covariate effects on the latent mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub mean_effects: Vec<f64>,
    pub logvar_effects: Vec<f64>,
}

impl PopulationParams {
    pub fn new(mean_effects: Vec<f64>, logvar_effects: Vec<f64>) -> Self {
        Self { mean_effects, logvar_effects }
    }

    /// Standard normal latent distribution for every covariate pattern.
    pub fn zeros(k: usize) -> Self {
        Self::new(vec![0.0; k], vec![0.0; k])
    }

    pub fn n_covariates(&self) -> usize {
        self.mean_effects.len()
    }
}

/// The complete parameter collection of an MNLFA model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub items: Vec<ItemParams>,
    pub population: PopulationParams,
}

impl ParamVector {
    pub fn new(items: Vec<ItemParams>, population: PopulationParams) -> Result<Self> {
        let k = population.n_covariates();
        if population.logvar_effects.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "mean effects have length {k} but log-variance effects have length {}",
                population.logvar_effects.len()
            )));
        }
        if !population.mean_effects.iter().chain(&population.logvar_effects).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("population parameters must be finite".into()));
        }
        for item in &items {
            item.validate(k)?;
        }
        Ok(Self { items, population })
    }

    /// Neutral starting point: unit slopes, zero intercepts, no DIF, N(0, 1) population.
    pub fn default_start(n_items: usize, k: usize) -> Self {
        Self {
            items: (0..n_items).map(|_| ItemParams::without_dif(1.0, 0.0, k)).collect(),
            population: PopulationParams::zeros(k),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.items.len(), self.population.n_covariates())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().dim());
        for item in &self.items {
            out.push(item.slope);
            out.push(item.intercept);
            out.extend_from_slice(&item.d_dif);
            out.extend_from_slice(&item.a_dif);
        }
        out.extend_from_slice(&self.population.mean_effects);
        out.extend_from_slice(&self.population.logvar_effects);
        out
    }

    pub fn from_flat(layout: Layout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.dim() {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector has length {}, layout expects {}",
                flat.len(),
                layout.dim()
            )));
        }
        let k = layout.n_covariates;
        let items = (0..layout.n_items)
            .map(|j| {
                let b = &flat[layout.item_offset(j)..layout.item_offset(j + 1)];
                ItemParams::new(b[0], b[1], b[2..2 + k].to_vec(), b[2 + k..2 + 2 * k].to_vec())
            })
            .collect();
        let p = layout.population_offset();
        let population = PopulationParams::new(flat[p..p + k].to_vec(), flat[p + k..p + 2 * k].to_vec());
        Ok(Self { items, population })
    }

    /// Sum of absolute DIF effects over all items.
    pub fn dif_l1_norm(&self) -> f64 {
        self.items
            .iter()
            .flat_map(|it| it.d_dif.iter().chain(&it.a_dif))
            .map(|b| b.abs())
            .sum()
    }
}

/// Index arithmetic for the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_items: usize,
    pub n_covariates: usize,
}

/// What a flat coordinate parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Slope { item: usize },
    Intercept { item: usize },
    DDif { item: usize, covariate: usize },
    ADif { item: usize, covariate: usize },
    Gamma { covariate: usize },
    Delta { covariate: usize },
}

impl Layout {
    pub fn new(n_items: usize, n_covariates: usize) -> Self {
        Self { n_items, n_covariates }
    }

    /// Parameters per item, `2 + 2K`.
    #[inline]
    pub fn per_item(&self) -> usize {
        2 + 2 * self.n_covariates
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n_items * self.per_item() + 2 * self.n_covariates
    }

    #[inline]
    pub fn item_offset(&self, item: usize) -> usize {
        item * self.per_item()
    }

    #[inline]
    pub fn slope(&self, item: usize) -> usize {
        self.item_offset(item)
    }

    #[inline]
    pub fn intercept(&self, item: usize) -> usize {
        self.item_offset(item) + 1
    }

    #[inline]
    pub fn d_dif(&self, item: usize, covariate: usize) -> usize {
        self.item_offset(item) + 2 + covariate
    }

    #[inline]
    pub fn a_dif(&self, item: usize, covariate: usize) -> usize {
        self.item_offset(item) + 2 + self.n_covariates + covariate
    }

    #[inline]
    pub fn population_offset(&self) -> usize {
        self.n_items * self.per_item()
    }

    #[inline]
    pub fn gamma(&self, covariate: usize) -> usize {
        self.population_offset() + covariate
    }

    #[inline]
    pub fn delta(&self, covariate: usize) -> usize {
        self.population_offset() + self.n_covariates + covariate
    }

    /// All coordinates of one item, `(a, d, beta0, beta1)`.
    pub fn item_block(&self, item: usize) -> Vec<usize> {
        (self.item_offset(item)..self.item_offset(item + 1)).collect()
    }

    /// The `2K` DIF coordinates of one item, d-DIF first.
    pub fn dif_block(&self, item: usize) -> Vec<usize> {
        (self.item_offset(item) + 2..self.item_offset(item + 1)).collect()
    }

    pub fn population_block(&self) -> Vec<usize> {
        (self.population_offset()..self.dim()).collect()
    }

    pub fn coordinate(&self, idx: usize) -> Coordinate {
        assert!(idx < self.dim(), "coordinate {idx} out of range {}", self.dim());
        let k = self.n_covariates;
        let pop = self.population_offset();
        if idx >= pop {
            let r = idx - pop;
            return if r < k { Coordinate::Gamma { covariate: r } } else { Coordinate::Delta { covariate: r - k } };
        }
        let item = idx / self.per_item();
        match idx % self.per_item() {
            0 => Coordinate::Slope { item },
            1 => Coordinate::Intercept { item },
            r if r < 2 + k => Coordinate::DDif { item, covariate: r - 2 },
            r => Coordinate::ADif { item, covariate: r - 2 - k },
        }
    }

    pub fn is_dif(&self, idx: usize) -> bool {
        matches!(self.coordinate(idx), Coordinate::DDif { .. } | Coordinate::ADif { .. })
    }

    /// Mask that is true exactly on DIF coordinates.
    pub fn dif_mask(&self) -> Vec<bool> {
        (0..self.dim()).map(|i| self.is_dif(i)).collect()
    }

    /// Stable coordinate name, e.g. `item3_beta1_gender` (items are 1-based).
    pub fn name(&self, idx: usize, covariates: &[String]) -> String {
        match self.coordinate(idx) {
            Coordinate::Slope { item } => format!("item{}_a", item + 1),
            Coordinate::Intercept { item } => format!("item{}_d", item + 1),
            Coordinate::DDif { item, covariate } => format!("item{}_beta0_{}", item + 1, covariates[covariate]),
            Coordinate::ADif { item, covariate } => format!("item{}_beta1_{}", item + 1, covariates[covariate]),
            Coordinate::Gamma { covariate } => format!("pop_gamma_{}", covariates[covariate]),
            Coordinate::Delta { covariate } => format!("pop_delta_{}", covariates[covariate]),
        }
    }

    pub fn names(&self, covariates: &[String]) -> Vec<String> {
        (0..self.dim()).map(|i| self.name(i, covariates)).collect()
    }

    /// Inverse of [`Layout::name`].
    pub fn index_of(&self, name: &str, covariates: &[String]) -> Option<usize> {
        (0..self.dim()).find(|&i| self.name(i, covariates) == name)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
