//! JSON documents written by `fit` and `test`.

use regdif_core::{FitFlags, FitResult, Layout, ParamVector, PenaltyConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub n_items: usize,
    pub covariates: Vec<String>,
    pub lambda: f64,
    /// Tuning constant when lambda came from `c / sqrt(n)`.
    pub lambda_constant: Option<f64>,
    /// Flattened estimate in layout order.
    pub coordinates: Vec<NamedValue>,
    /// Coordinates estimated by the fit; the rest are held at zero.
    pub free: Vec<String>,
    /// Coordinates carrying the L1 penalty.
    pub penalized: Vec<String>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub quadrature_q: usize,
    pub flags: FitFlags,
}

impl FitFile {
    pub fn from_fit(fit: &FitResult, covariates: &[String], lambda_constant: Option<f64>) -> Self {
        let layout = fit.layout();
        let names = layout.names(covariates);
        let flat = fit.estimate.flatten();
        let pick = |mask: &[bool], want: bool| names.iter().zip(mask).filter(|(_, &m)| m == want).map(|(n, _)| n.clone()).collect();
        Self {
            n_items: layout.n_items,
            covariates: covariates.to_vec(),
            lambda: fit.lambda,
            lambda_constant,
            coordinates: names.iter().zip(&flat).map(|(name, &value)| NamedValue { name: name.clone(), value }).collect(),
            free: pick(&fit.penalty.fixed_zero_mask, false),
            penalized: pick(&fit.penalty.penalized_mask, true),
            trace: fit.trace.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            final_loss: fit.final_loss,
            quadrature_q: fit.quadrature_q,
            flags: fit.flags.clone(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n_items, self.covariates.len())
    }

    /// Rebuilds the fit, checking that the coordinate names match the layout.
    pub fn to_fit(&self) -> CliResult<FitResult> {
        let layout = self.layout();
        let names = layout.names(&self.covariates);
        if self.coordinates.len() != names.len() {
            return Err(CliError::Usage(format!(
                "fit has {} coordinates, a {}-item model with {} covariates has {}",
                self.coordinates.len(),
                self.n_items,
                self.covariates.len(),
                names.len()
            )));
        }
        for (c, expected) in self.coordinates.iter().zip(&names) {
            if &c.name != expected {
                return Err(CliError::Usage(format!("fit coordinate {} found where {expected} was expected", c.name)));
            }
        }
        let mask = |list: &[String]| -> CliResult<Vec<bool>> {
            let mut m = vec![false; names.len()];
            for name in list {
                let idx = layout
                    .index_of(name, &self.covariates)
                    .ok_or_else(|| CliError::Usage(format!("unknown coordinate {name} in fit")))?;
                m[idx] = true;
            }
            Ok(m)
        };
        let free = mask(&self.free)?;
        let penalty = PenaltyConfig {
            lambda: self.lambda,
            penalized_mask: mask(&self.penalized)?,
            fixed_zero_mask: free.iter().map(|f| !f).collect(),
        };
        penalty.validate(layout)?;
        let flat: Vec<f64> = self.coordinates.iter().map(|c| c.value).collect();
        Ok(FitResult {
            estimate: ParamVector::from_flat(layout, &flat)?,
            lambda: self.lambda,
            iterations: self.iterations,
            converged: self.converged,
            trace: self.trace.clone(),
            final_loss: self.final_loss,
            penalty,
            quadrature_q: self.quadrature_q,
            flags: self.flags.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    /// Decorrelated score test with one-step debiased estimates.
    Dscore,
    /// Wald test from an unpenalized fit.
    Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateReport {
    pub name: String,
    pub estimate: f64,
    /// One-step debiased value; absent for Wald reports.
    pub debiased: Option<f64>,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub target: String,
    pub method: TestMethod,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub lambda_prime: Option<f64>,
    pub coordinates: Vec<CoordinateReport>,
}
