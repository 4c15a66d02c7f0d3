use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ItemParams, ParamVector, PopulationParams};

/// Covariate names of the study design, in column order.
pub const COVARIATES: [&str; 3] = ["age", "gender", "product"];

/// Number of items in the study design.
pub const N_ITEMS: usize = 12;

/// Share of items with DIF in the generating model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DifCondition {
    /// No DIF anywhere.
    None,
    /// DIF on items 1-3.
    Quarter,
    /// DIF on items 1-6.
    Half,
}

impl DifCondition {
    pub const ALL: [DifCondition; 3] = [DifCondition::None, DifCondition::Quarter, DifCondition::Half];

    pub fn percent(self) -> u32 {
        match self {
            DifCondition::None => 0,
            DifCondition::Quarter => 25,
            DifCondition::Half => 50,
        }
    }

    pub fn from_percent(p: u32) -> Result<Self> {
        match p {
            0 => Ok(DifCondition::None),
            25 => Ok(DifCondition::Quarter),
            50 => Ok(DifCondition::Half),
            _ => Err(Error::InvalidArgument(format!("DIF condition must be 0, 25 or 50 percent, got {p}"))),
        }
    }

    /// Number of items carrying DIF.
    pub fn n_dif_items(self) -> usize {
        match self {
            DifCondition::None => 0,
            DifCondition::Quarter => 3,
            DifCondition::Half => 6,
        }
    }

    /// Default tuning constant `c` in `lambda = c / sqrt(n)`.
    pub fn default_lambda_constant(self) -> f64 {
        match self {
            DifCondition::None => 0.8291,
            DifCondition::Quarter => 0.6883,
            DifCondition::Half => 0.5727,
        }
    }
}

impl std::fmt::Display for DifCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.percent())
    }
}

// (d, a, a-DIF age/gender/product, d-DIF age/gender/product)
const DIF_ROWS: [[f64; 8]; 6] = [
    [0.00, 2.00, 0.20, 0.50, 0.20, 0.20, -0.50, -0.20],
    [1.20, 1.20, -0.20, -0.50, 0.00, -0.20, 0.25, 0.00],
    [-0.20, 2.00, -0.25, 0.25, 0.10, -0.15, -0.25, -0.15],
    [1.50, 1.50, 0.20, -0.50, -0.20, 0.20, 0.50, 0.20],
    [1.20, 1.20, -0.20, -0.50, 0.00, -0.20, 0.25, 0.00],
    [1.10, 1.90, -0.25, 0.25, -0.10, -0.15, -0.25, 0.15],
];

// (d, a) of the DIF-free items 7-12
const PLAIN_ROWS: [[f64; 2]; 6] = [[-1.80, 2.40], [0.50, 1.50], [0.60, 1.40], [-2.00, 1.80], [0.60, 2.30], [1.60, 1.80]];

/// Data-generating model of the simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub params: ParamVector,
    pub condition: DifCondition,
}

impl TrueModel {
    pub fn new(condition: DifCondition) -> Self {
        let n_dif = condition.n_dif_items();
        let mut items = Vec::with_capacity(N_ITEMS);
        for (j, row) in DIF_ROWS.iter().enumerate() {
            let (d_dif, a_dif) = if j < n_dif { (row[5..8].to_vec(), row[2..5].to_vec()) } else { (vec![0.0; 3], vec![0.0; 3]) };
            items.push(ItemParams::new(row[1], row[0], d_dif, a_dif));
        }
        for row in PLAIN_ROWS {
            items.push(ItemParams::without_dif(row[1], row[0], 3));
        }
        let population = PopulationParams::new(vec![-0.2, -0.2, -0.2], vec![-0.1, 0.3, 0.1]);
        Self { params: ParamVector { items, population }, condition }
    }

    /// Items (0-based) with a nonzero DIF effect.
    pub fn dif_items(&self) -> Vec<usize> {
        (0..self.params.items.len()).filter(|&j| self.params.items[j].has_dif()).collect()
    }

    pub fn covariate_names() -> Vec<String> {
        COVARIATES.iter().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditions_zero_the_right_items() {
        assert_eq!(TrueModel::new(DifCondition::Half).dif_items(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(TrueModel::new(DifCondition::Quarter).dif_items(), vec![0, 1, 2]);
        assert!(TrueModel::new(DifCondition::None).dif_items().is_empty());
        let m = TrueModel::new(DifCondition::None);
        assert_eq!(m.params.items[0].slope, 2.0);
        assert_eq!(m.params.items[3].intercept, 1.5);
    }

    #[test]
    fn table_values() {
        let m = TrueModel::new(DifCondition::Half);
        let it = &m.params.items[0];
        assert_eq!((it.intercept, it.slope), (0.0, 2.0));
        assert_eq!(it.a_dif, vec![0.2, 0.5, 0.2]);
        assert_eq!(it.d_dif, vec![0.2, -0.5, -0.2]);
        let it = &m.params.items[5];
        assert_eq!(it.a_dif, vec![-0.25, 0.25, -0.10]);
        assert_eq!(it.d_dif, vec![-0.15, -0.25, 0.15]);
        assert_eq!((m.params.items[9].intercept, m.params.items[9].slope), (-2.0, 1.8));
        assert_eq!(m.params.population.logvar_effects, vec![-0.1, 0.3, 0.1]);
        assert_eq!(m.params.layout().dim(), 102);
    }
}
