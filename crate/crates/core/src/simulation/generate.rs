use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{latent_moments, logistic};
use crate::params::ParamVector;

use super::truth::TrueModel;

/// Draws `n` rows of `(age, gender, product)`, row-major.
pub fn generate_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one person".into()));
    }
    let mut x = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let gender = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(rng);
        let age = z + 0.2 * gender;
        x.extend_from_slice(&[age, gender, age * gender]);
    }
    Ok(x)
}

/// Draws latent traits and item responses for covariate rows `x`
/// (row-major, `K` columns). Returns the responses and the drawn traits.
pub fn generate_responses_with<R: Rng + ?Sized>(
    x: &[f64],
    params: &ParamVector,
    rng: &mut R,
) -> Result<(Vec<u8>, Vec<f64>)> {
    let k = params.population.n_covariates();
    if k == 0 || x.len() % k != 0 {
        return Err(Error::DimensionMismatch(format!("{} covariate values for {k} columns", x.len())));
    }
    let n = x.len() / k;
    let mut y = Vec::with_capacity(n * params.items.len());
    let mut thetas = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let (mu, var) = latent_moments(xi, &params.population)?;
        let z: f64 = StandardNormal.sample(rng);
        let theta = mu + var.sqrt() * z;
        thetas.push(theta);
        for item in &params.items {
            let p = logistic(item.intercept_at(xi) + item.slope_at(xi) * theta);
            y.push(u8::from(rng.random::<f64>() < p));
        }
    }
    Ok((y, thetas))
}

/// Responses under the study's true model.
pub fn generate_responses<R: Rng + ?Sized>(x: &[f64], truth: &TrueModel, rng: &mut R) -> Result<Vec<u8>> {
    Ok(generate_responses_with(x, &truth.params, rng)?.0)
}

/// A complete dataset of `n` persons drawn from `truth`.
pub fn generate_dataset<R: Rng + ?Sized>(n: usize, truth: &TrueModel, rng: &mut R) -> Result<Dataset> {
    let x = generate_covariates(n, rng)?;
    let y = generate_responses(&x, truth, rng)?;
    Dataset::new(n, truth.params.items.len(), y, x, TrueModel::covariate_names())
}
