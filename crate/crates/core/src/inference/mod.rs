//! Decorrelated score tests, one-step debiased estimates and Wald tests.
//!
//! All quantities refer to the loss `l = -l_n` (negative average marginal
//! log-likelihood). For a focal block `psi` with nuisance `eta` the
//! decorrelated score is `s = grad_psi l - W' grad_eta l`, where `W` is a
//! lasso projection of the focal scores on the nuisance scores.

mod lasso;
mod linalg;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::em::{penalized_em_fit, EmConfig, FitResult, PenaltyConfig};
use crate::error::{Error, Result};
use crate::model::{information_flat, loglik_and_gradient, observed_information, score_flat, Score};
use crate::params::{Layout, ParamVector};
use crate::quadrature::GaussHermiteRule;

pub use lasso::{lasso_covariance, LassoSolution, LASSO_TOL};
pub use linalg::{spd_inverse, submatrix, symmetrize, MAX_CONDITION};

/// Ordered set of focal coordinates `psi` with a label for messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocalSpec {
    pub indices: Vec<usize>,
    pub label: String,
}

impl FocalSpec {
    pub fn new(indices: Vec<usize>, label: impl Into<String>, dim: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("focal set is empty".into()));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::InvalidArgument("focal indices must be distinct".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= dim) {
            return Err(Error::InvalidArgument(format!("focal index {bad} outside dimension {dim}")));
        }
        Ok(Self { indices, label: label.into() })
    }

    /// The `2K` DIF effects of item `item` (0-based).
    pub fn item_dif(layout: Layout, item: usize) -> Result<Self> {
        check_item(layout, item)?;
        Self::new(layout.dif_block(item), format!("item {} DIF block", item + 1), layout.dim())
    }

    /// All parameters `(a, d, beta0, beta1)` of item `item`.
    pub fn item_block(layout: Layout, item: usize) -> Result<Self> {
        check_item(layout, item)?;
        Self::new(layout.item_block(item), format!("item {} parameters", item + 1), layout.dim())
    }

    pub fn population(layout: Layout) -> Result<Self> {
        Self::new(layout.population_block(), "population parameters", layout.dim())
    }

    /// A single coordinate, labelled with its name.
    pub fn coordinate(layout: Layout, index: usize, covariates: &[String]) -> Result<Self> {
        if index >= layout.dim() {
            return Err(Error::InvalidArgument(format!("coordinate {index} outside dimension {}", layout.dim())));
        }
        Self::new(vec![index], layout.name(index, covariates), layout.dim())
    }

    pub fn d0(&self) -> usize {
        self.indices.len()
    }
}

fn check_item(layout: Layout, item: usize) -> Result<()> {
    if item >= layout.n_items {
        return Err(Error::InvalidArgument(format!("item {} out of range 1..={}", item + 1, layout.n_items)));
    }
    Ok(())
}

/// Matrix whose lasso regression defines `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionGram {
    /// Regression of per-person focal scores on per-person nuisance scores.
    #[default]
    ScoreOuterProduct,
    /// Regression through the observed information, `W -> H_ee^-1 H_ep`.
    Hessian,
}

/// How the observed information is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMethod {
    #[default]
    Analytic,
    /// Central differences of the analytic score.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub gram: ProjectionGram,
    pub hessian: HessianMethod,
}

/// Result of the decorrelated score test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscoreReport {
    pub label: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// `d1 x d0`, one column per focal coordinate.
    pub w_hat: DMatrix<f64>,
    pub score_at_null: Vec<f64>,
    pub efficient_info: DMatrix<f64>,
}

/// One-step debiased estimate with standard errors and confidence limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasReport {
    pub label: String,
    pub indices: Vec<usize>,
    pub estimate: Vec<f64>,
    pub debiased: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub alpha: f64,
}

/// Wald test of a set of free coordinates being zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    pub label: String,
    pub indices: Vec<usize>,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
}

/// Estimated projection `W` for one focal block.
#[derive(Debug, Clone, PartialEq)]
pub struct WEstimate {
    /// `d1 x d0`.
    pub w: DMatrix<f64>,
    pub nuisance: Vec<usize>,
    /// Largest KKT residual over columns.
    pub kkt_residual: f64,
    pub converged: bool,
}

/// `P(chi2_df > t)`.
pub fn chi_square_sf(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidArgument("chi-square needs df >= 1".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi-square statistic must be nonnegative, got {t}")));
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sf(t).clamp(0.0, 1.0))
}

/// Standard normal quantile `z_{1 - alpha/2}`.
pub fn normal_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Confidence interval `estimate -+ z se`.
pub fn confidence_interval(estimate: f64, se: f64, alpha: f64) -> Result<(f64, f64)> {
    let z = normal_critical(alpha)?;
    Ok((estimate - z * se, estimate + z * se))
}

/// Per-person scores and the observed information at one parameter point,
/// shared by every test on the same fit.
pub struct InferenceContext<'a> {
    data: &'a Dataset,
    rule: GaussHermiteRule,
    layout: Layout,
    estimate: Vec<f64>,
    fixed: Vec<bool>,
    score: Score,
    hessian: DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
    options: InferenceOptions,
}

impl<'a> InferenceContext<'a> {
    /// Context at the estimate of `fit`; coordinates the fit held at zero
    /// are excluded from every nuisance set.
    pub fn new(fit: &FitResult, data: &'a Dataset, options: InferenceOptions) -> Result<Self> {
        Self::at(&fit.estimate, &fit.penalty.fixed_zero_mask, fit.quadrature_q, data, options)
    }

    pub fn at(params: &ParamVector, fixed: &[bool], q: usize, data: &'a Dataset, options: InferenceOptions) -> Result<Self> {
        let layout = params.layout();
        if fixed.len() != layout.dim() {
            return Err(Error::DimensionMismatch(format!("fixed mask has length {}, expected {}", fixed.len(), layout.dim())));
        }
        let rule = GaussHermiteRule::new(q)?;
        let estimate = params.flatten();
        let score = score_flat(&estimate, layout, data, &rule)?;
        let hessian = match options.hessian {
            HessianMethod::Analytic => information_flat(&estimate, layout, data, &rule)?,
            HessianMethod::FiniteDifference => observed_information(params, data, &rule)?,
        };
        let gram = match options.gram {
            ProjectionGram::ScoreOuterProduct => {
                let n = data.n_persons();
                let rows = DMatrix::from_row_slice(n, layout.dim(), &score.per_person);
                Some(rows.tr_mul(&rows) / n as f64)
            }
            ProjectionGram::Hessian => None,
        };
        Ok(Self { data, rule, layout, estimate, fixed: fixed.to_vec(), score, hessian, gram, options })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn score(&self) -> &Score {
        &self.score
    }

    pub fn options(&self) -> InferenceOptions {
        self.options
    }

    fn check_spec(&self, spec: &FocalSpec) -> Result<()> {
        if let Some(&bad) = spec.indices.iter().find(|&&c| c >= self.layout.dim()) {
            return Err(Error::InvalidArgument(format!("focal index {bad} outside dimension {}", self.layout.dim())));
        }
        Ok(())
    }

    /// Free coordinates outside the focal set.
    pub fn nuisance(&self, spec: &FocalSpec) -> Vec<usize> {
        (0..self.layout.dim()).filter(|c| !self.fixed[*c] && !spec.indices.contains(c)).collect()
    }

    /// Column-by-column lasso estimate of `W` with penalty `lambda_prime`.
    pub fn estimate_w(&self, spec: &FocalSpec, lambda_prime: f64) -> Result<WEstimate> {
        self.check_spec(spec)?;
        if !(lambda_prime >= 0.0 && lambda_prime.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda' must be finite and nonnegative, got {lambda_prime}")));
        }
        let nuisance = self.nuisance(spec);
        let source = self.gram.as_ref().unwrap_or(&self.hessian);
        let g = submatrix(source, &nuisance, &nuisance);
        let mut w = DMatrix::zeros(nuisance.len(), spec.d0());
        let mut kkt_residual = 0.0f64;
        let mut converged = true;
        for (m, &focal) in spec.indices.iter().enumerate() {
            let b: Vec<f64> = nuisance.iter().map(|&k| source[(k, focal)]).collect();
            let sol = lasso_covariance(&g, &b, lambda_prime, LASSO_TOL);
            if sol.kkt_residual > lambda_prime + 1e-6 {
                log::warn!("{}: decorrelation KKT residual {:.3e} exceeds lambda'", spec.label, sol.kkt_residual);
            }
            kkt_residual = kkt_residual.max(sol.kkt_residual);
            converged &= sol.converged;
            for (r, v) in sol.coefficients.into_iter().enumerate() {
                w[(r, m)] = v;
            }
        }
        Ok(WEstimate { w, nuisance, kkt_residual, converged })
    }

    fn project(&self, gradient: &[f64], spec: &FocalSpec, w: &WEstimate) -> Vec<f64> {
        (0..spec.d0())
            .map(|m| {
                let proj: f64 = w.nuisance.iter().enumerate().map(|(r, &k)| w.w[(r, m)] * gradient[k]).sum();
                gradient[spec.indices[m]] - proj
            })
            .collect()
    }

    /// Decorrelated score at the context's estimate.
    pub fn decorrelated_score(&self, spec: &FocalSpec, w: &WEstimate) -> Vec<f64> {
        self.project(&self.score.gradient, spec, w)
    }

    /// Decorrelated score at the estimate with the focal block set to zero.
    pub fn decorrelated_score_at_null(&self, spec: &FocalSpec, w: &WEstimate) -> Result<Vec<f64>> {
        if spec.indices.iter().all(|&c| self.estimate[c] == 0.0) {
            return Ok(self.decorrelated_score(spec, w));
        }
        let mut null = self.estimate.clone();
        for &c in &spec.indices {
            null[c] = 0.0;
        }
        let (_, gradient) = loglik_and_gradient(&null, self.layout, self.data, &self.rule)?;
        Ok(self.project(&gradient, spec, w))
    }

    /// `H_pp - W' H_ep`, symmetrized.
    pub fn efficient_information(&self, spec: &FocalSpec, w: &WEstimate) -> DMatrix<f64> {
        let h_pp = submatrix(&self.hessian, &spec.indices, &spec.indices);
        let h_ep = submatrix(&self.hessian, &w.nuisance, &spec.indices);
        symmetrize(&(h_pp - w.w.transpose() * h_ep))
    }

    /// Decorrelated score test of `psi = 0`.
    pub fn dscore_test(&self, spec: &FocalSpec, lambda_prime: f64) -> Result<DscoreReport> {
        let w = self.estimate_w(spec, lambda_prime)?;
        let s = self.decorrelated_score_at_null(spec, &w)?;
        let info = self.efficient_information(spec, &w);
        let inv = spd_inverse(&info, &spec.label)?;
        let sv = nalgebra::DVector::from_column_slice(&s);
        let statistic = (self.data.n_persons() as f64 * (sv.transpose() * &inv * &sv)[(0, 0)]).max(0.0);
        let df = spec.d0();
        Ok(DscoreReport {
            label: spec.label.clone(),
            statistic,
            df,
            p_value: chi_square_sf(statistic, df)?,
            w_hat: w.w,
            score_at_null: s,
            efficient_info: info,
        })
    }

    /// One Newton step on the focal block along the decorrelated score.
    pub fn one_step_debias(&self, spec: &FocalSpec, lambda_prime: f64, alpha: f64) -> Result<DebiasReport> {
        let z = normal_critical(alpha)?;
        let w = self.estimate_w(spec, lambda_prime)?;
        let s = self.decorrelated_score(spec, &w);
        let info = self.efficient_information(spec, &w);
        let inv = spd_inverse(&info, &spec.label)?;
        let step = &inv * nalgebra::DVector::from_column_slice(&s);
        let n = self.data.n_persons() as f64;
        let estimate: Vec<f64> = spec.indices.iter().map(|&c| self.estimate[c]).collect();
        let debiased: Vec<f64> = estimate.iter().zip(step.iter()).map(|(e, d)| e - d).collect();
        let se: Vec<f64> = (0..spec.d0()).map(|m| (inv[(m, m)] / n).sqrt()).collect();
        let ci_lower = debiased.iter().zip(&se).map(|(d, s)| d - z * s).collect();
        let ci_upper = debiased.iter().zip(&se).map(|(d, s)| d + z * s).collect();
        Ok(DebiasReport { label: spec.label.clone(), indices: spec.indices.clone(), estimate, debiased, se, ci_lower, ci_upper, alpha })
    }

    /// Inverse observed information restricted to the free coordinates,
    /// divided by `n`: the sampling covariance of an unpenalized fit.
    pub fn free_covariance(&self) -> Result<(Vec<usize>, DMatrix<f64>)> {
        let free: Vec<usize> = (0..self.layout.dim()).filter(|&c| !self.fixed[c]).collect();
        let h = submatrix(&self.hessian, &free, &free);
        let inv = spd_inverse(&h, "free parameters")?;
        Ok((free, inv / self.data.n_persons() as f64))
    }

    /// Wald test that the listed free coordinates are zero, from an
    /// unpenalized fit. Standard errors of all free coordinates come from
    /// `covariance` as returned by [`InferenceContext::free_covariance`].
    pub fn wald_test(&self, indices: &[usize], label: &str, covariance: &(Vec<usize>, DMatrix<f64>)) -> Result<WaldReport> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument(format!("{label}: no free coordinates to test")));
        }
        let (free, cov) = covariance;
        let pos: Vec<usize> = indices
            .iter()
            .map(|c| {
                free.iter()
                    .position(|f| f == c)
                    .ok_or_else(|| Error::InvalidArgument(format!("{label}: coordinate {c} is fixed in this fit")))
            })
            .collect::<Result<_>>()?;
        let v = submatrix(cov, &pos, &pos);
        let v_inv = spd_inverse(&v, label)?;
        let estimate: Vec<f64> = indices.iter().map(|&c| self.estimate[c]).collect();
        let b = nalgebra::DVector::from_column_slice(&estimate);
        let statistic = (b.transpose() * v_inv * &b)[(0, 0)].max(0.0);
        let se = pos.iter().map(|&p| cov[(p, p)].sqrt()).collect();
        Ok(WaldReport {
            label: label.to_string(),
            indices: indices.to_vec(),
            statistic,
            df: indices.len(),
            p_value: chi_square_sf(statistic, indices.len())?,
            estimate,
            se,
        })
    }
}

/// Lasso projection for one focal block at the estimate of `fit`.
pub fn estimate_w(fit: &FitResult, data: &Dataset, spec: &FocalSpec, lambda_prime: f64) -> Result<WEstimate> {
    InferenceContext::new(fit, data, InferenceOptions::default())?.estimate_w(spec, lambda_prime)
}

fn check_w(params: &ParamVector, w: &DMatrix<f64>, spec: &FocalSpec) -> Result<Vec<usize>> {
    let d = params.layout().dim();
    if let Some(&bad) = spec.indices.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidArgument(format!("focal index {bad} outside dimension {d}")));
    }
    let nuisance: Vec<usize> = (0..d).filter(|c| !spec.indices.contains(c)).collect();
    if w.nrows() != nuisance.len() || w.ncols() != spec.d0() {
        return Err(Error::InvalidArgument(format!(
            "W is {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            nuisance.len(),
            spec.d0()
        )));
    }
    Ok(nuisance)
}

/// `grad_psi l - W' grad_eta l` at `params`, with `eta` every non-focal coordinate.
pub fn decorrelated_score(params: &ParamVector, w: &DMatrix<f64>, data: &Dataset, spec: &FocalSpec, q: usize) -> Result<Vec<f64>> {
    let nuisance = check_w(params, w, spec)?;
    let rule = GaussHermiteRule::new(q)?;
    let (_, g) = loglik_and_gradient(&params.flatten(), params.layout(), data, &rule)?;
    Ok((0..spec.d0())
        .map(|m| g[spec.indices[m]] - nuisance.iter().enumerate().map(|(r, &k)| w[(r, m)] * g[k]).sum::<f64>())
        .collect())
}

/// `H_pp - W' H_ep` at `params`, symmetrized.
pub fn efficient_information(params: &ParamVector, w: &DMatrix<f64>, data: &Dataset, spec: &FocalSpec, q: usize) -> Result<DMatrix<f64>> {
    let nuisance = check_w(params, w, spec)?;
    let rule = GaussHermiteRule::new(q)?;
    let h = information_flat(&params.flatten(), params.layout(), data, &rule)?;
    let h_pp = submatrix(&h, &spec.indices, &spec.indices);
    let h_ep = submatrix(&h, &nuisance, &spec.indices);
    Ok(symmetrize(&(h_pp - w.transpose() * h_ep)))
}

/// Decorrelated score test of `psi = 0` from a penalized fit.
pub fn dscore_test(fit: &FitResult, data: &Dataset, spec: &FocalSpec, lambda_prime: f64) -> Result<DscoreReport> {
    InferenceContext::new(fit, data, InferenceOptions::default())?.dscore_test(spec, lambda_prime)
}

/// One-step debiased estimate of the focal block of a penalized fit.
pub fn one_step_debias(fit: &FitResult, data: &Dataset, spec: &FocalSpec, lambda_prime: f64, alpha: f64) -> Result<DebiasReport> {
    InferenceContext::new(fit, data, InferenceOptions::default())?.one_step_debias(spec, lambda_prime, alpha)
}

/// Wald test of item `target`'s DIF block in the model whose `anchors`
/// carry no DIF, fitted by unpenalized EM.
pub fn wald_test_oracle(data: &Dataset, anchors: &[usize], target: usize, config: &EmConfig) -> Result<WaldReport> {
    let layout = Layout::new(data.n_items(), data.n_covariates());
    check_anchors(layout, anchors)?;
    if anchors.contains(&target) {
        return Err(Error::InvalidArgument(format!("item {} is an anchor and cannot be tested", target + 1)));
    }
    check_item(layout, target)?;
    let fit = penalized_em_fit(data, &PenaltyConfig::anchored(layout, anchors), config)?;
    let ctx = InferenceContext::new(&fit, data, InferenceOptions::default())?;
    let cov = ctx.free_covariance()?;
    ctx.wald_test(&layout.dif_block(target), &format!("item {} DIF block", target + 1), &cov)
}

pub(crate) fn check_anchors(layout: Layout, anchors: &[usize]) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("at least one anchor item is required".into()));
    }
    for &a in anchors {
        check_item(layout, a)?;
    }
    Ok(())
}
