mod common;

use common::{classical_score_statistic, inverse, random_params, rng, simulate, table2};
use nalgebra::{DMatrix, DVector};
use regdif_core::em::{penalized_em_fit, select_lambda, EmConfig, FitResult, PenaltyConfig};
use regdif_core::inference::{chi_square_sf, decorrelated_score, efficient_information, lasso_covariance, submatrix};
use regdif_core::model::score_vector;
use regdif_core::simulation::DifCondition;
use regdif_core::{
    wald_test_oracle, Dataset, FocalSpec, GaussHermiteRule, InferenceContext, InferenceOptions, Layout, ParamVector, ProjectionGram,
};

fn hessian_gram() -> InferenceOptions {
    InferenceOptions { gram: ProjectionGram::Hessian, ..InferenceOptions::default() }
}

fn tight() -> EmConfig {
    EmConfig { em_tol: 1e-12, mstep_tol: 1e-10, max_iter: 20_000, ..EmConfig::default() }
}

/// Four items with one covariate, item 1 anchored, unpenalized.
fn identified_fit(seed: u64) -> (Dataset, FitResult) {
    let mut r = rng(seed);
    let truth = random_params(&mut r, 4, 1);
    let data = simulate(&mut r, &truth, 400);
    let fit = penalized_em_fit(&data, &PenaltyConfig::anchored(Layout::new(4, 1), &[0]), &tight()).unwrap();
    (data, fit)
}

#[test]
fn efficient_information_is_the_schur_complement() {
    let (data, fit) = identified_fit(1);
    let ctx = InferenceContext::new(&fit, &data, hessian_gram()).unwrap();
    let layout = fit.layout();
    for item in 1..4 {
        let spec = FocalSpec::item_dif(layout, item).unwrap();
        let w = ctx.estimate_w(&spec, 0.0).unwrap();
        let info = ctx.efficient_information(&spec, &w);
        let h = ctx.hessian();
        let nuisance = &w.nuisance;
        let h_pe = submatrix(h, &spec.indices, nuisance);
        let schur = submatrix(h, &spec.indices, &spec.indices) - &h_pe * inverse(&submatrix(h, nuisance, nuisance)) * h_pe.transpose();
        let gap = (&info - &schur).abs().max();
        assert!(gap < 1e-5, "item {}: {gap:.3e}", item + 1);
        assert!(info.clone().symmetric_eigenvalues().min() > 0.0);
    }
}

#[test]
fn dscore_matches_classical_efficient_score_statistic() {
    for seed in 0..4 {
        let (data, fit) = identified_fit(10 + seed);
        let ctx = InferenceContext::new(&fit, &data, hessian_gram()).unwrap();
        for item in 1..4 {
            let spec = FocalSpec::item_dif(fit.layout(), item).unwrap();
            let report = ctx.dscore_test(&spec, 0.0).unwrap();
            let oracle = classical_score_statistic(&ctx, &data, &fit.penalty.fixed_zero_mask, &spec.indices);
            assert!((report.statistic - oracle).abs() < 1e-4, "seed {seed} item {}: {} vs {oracle}", item + 1, report.statistic);
            assert_eq!(report.df, 2);
            assert!((report.p_value - chi_square_sf(report.statistic, 2).unwrap()).abs() < 1e-15);
        }
    }
}

#[test]
fn huge_lambda_prime_gives_zero_projection() {
    let (data, fit) = identified_fit(2);
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    let spec = FocalSpec::item_dif(fit.layout(), 2).unwrap();
    let w = ctx.estimate_w(&spec, 1e6).unwrap();
    assert!(w.w.iter().all(|&v| v == 0.0));
    // W = 0 leaves the raw gradient and the psi-psi Hessian block
    let s = ctx.decorrelated_score(&spec, &w);
    for (m, &c) in spec.indices.iter().enumerate() {
        assert_eq!(s[m], ctx.score().gradient[c]);
    }
    assert_eq!(ctx.efficient_information(&spec, &w), submatrix(ctx.hessian(), &spec.indices, &spec.indices));
}

#[test]
fn free_functions_with_zero_w() {
    let (data, fit) = identified_fit(3);
    let layout = fit.layout();
    let spec = FocalSpec::item_block(layout, 1).unwrap();
    let w = DMatrix::zeros(layout.dim() - spec.d0(), spec.d0());
    let rule = GaussHermiteRule::new(49).unwrap();
    let g = score_vector(&fit.estimate, &data, &rule).unwrap().gradient;
    let s = decorrelated_score(&fit.estimate, &w, &data, &spec, 49).unwrap();
    assert_eq!(s, spec.indices.iter().map(|&c| g[c]).collect::<Vec<_>>());
    let info = efficient_information(&fit.estimate, &w, &data, &spec, 49).unwrap();
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    assert!((info - submatrix(ctx.hessian(), &spec.indices, &spec.indices)).abs().max() < 1e-12);
    assert!(decorrelated_score(&fit.estimate, &DMatrix::zeros(3, 2), &data, &spec, 49).is_err());
}

#[test]
fn zero_penalty_projection_is_least_squares_on_person_scores() {
    let (data, fit) = identified_fit(4);
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    let spec = FocalSpec::item_dif(fit.layout(), 3).unwrap();
    let w = ctx.estimate_w(&spec, 0.0).unwrap();
    let score = ctx.score();
    let n = data.n_persons();
    let x = DMatrix::from_fn(n, w.nuisance.len(), |i, r| score.row(i)[w.nuisance[r]]);
    for (m, &c) in spec.indices.iter().enumerate() {
        let y = DVector::from_fn(n, |i, _| score.row(i)[c]);
        let ls = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        let gap = (w.w.column(m) - ls).abs().max();
        assert!(gap < 1e-6, "column {m}: {gap:.3e}");
    }
}

#[test]
fn planted_projection_is_recovered() {
    let mut r = rng(5);
    let n = 500;
    let p = 6;
    let x = DMatrix::from_fn(n, p, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
    let y = x.column(0) * 2.0;
    let g = x.transpose() * &x / n as f64;
    let b: Vec<f64> = (x.transpose() * y / n as f64).iter().copied().collect();
    let sol = lasso_covariance(&g, &b, 1e-4, 1e-10);
    assert!((sol.coefficients[0] - 2.0).abs() < 1e-2, "{:?}", sol.coefficients);
    assert!(sol.coefficients[1..].iter().all(|v| v.abs() < 1e-2), "{:?}", sol.coefficients);
}

#[test]
fn decorrelated_person_scores_are_uncorrelated_with_nuisance_scores() {
    let data = table2(500, DifCondition::Quarter, 6);
    let lambda = select_lambda(500, 0.6883).unwrap();
    let fit = penalized_em_fit(&data, &PenaltyConfig::lasso(Layout::new(12, 3), lambda), &EmConfig::default()).unwrap();
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    let n = data.n_persons();
    for item in [0, 6] {
        let spec = FocalSpec::item_dif(fit.layout(), item).unwrap();
        let w = ctx.estimate_w(&spec, lambda).unwrap();
        for (m, &c) in spec.indices.iter().enumerate() {
            for (r, &k) in w.nuisance.iter().enumerate() {
                let mut cross = 0.0;
                for i in 0..n {
                    let row = ctx.score().row(i);
                    let s_i = row[c] - w.nuisance.iter().enumerate().map(|(q, &e)| w.w[(q, m)] * row[e]).sum::<f64>();
                    cross += s_i * row[k];
                }
                cross /= n as f64;
                assert!(cross.abs() <= lambda + 1e-6, "item {} column {m}, nuisance {r}: {cross:.3e}", item + 1);
            }
        }
    }
}

/// A two-parameter model has no quadrature-moved population block, so the
/// EM fixed point is an exact stationary point of the marginal likelihood.
#[test]
fn score_vanishes_at_unpenalized_ml_with_full_focal_set() {
    let mut r = rng(7);
    let truth = random_params(&mut r, 5, 0);
    let data = simulate(&mut r, &truth, 400);
    let fit = penalized_em_fit(&data, &PenaltyConfig::unpenalized(Layout::new(5, 0)), &tight()).unwrap();
    let layout = fit.layout();
    let spec = FocalSpec::new((0..layout.dim()).collect(), "all", layout.dim()).unwrap();
    let s = decorrelated_score(&fit.estimate, &DMatrix::zeros(0, layout.dim()), &data, &spec, 49).unwrap();
    assert!(s.iter().all(|v| v.abs() < 1e-6), "{s:?}");

    // and the one-step correction is then a zero step, up to the gradient
    // residual amplified by the inverse efficient information
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    let report = ctx.one_step_debias(&FocalSpec::item_block(layout, 2).unwrap(), 0.0, 0.05).unwrap();
    for (e, d) in report.estimate.iter().zip(&report.debiased) {
        assert!((e - d).abs() < 1e-5, "{e} vs {d}");
    }
}

/// Starting from the ML estimate with the focal block displaced by `h`,
/// one decorrelated Newton step returns to the ML estimate up to `O(h^2)`.
#[test]
fn one_step_from_a_displaced_estimate_is_second_order_accurate() {
    let (data, fit) = identified_fit(8);
    let layout = fit.layout();
    let spec = FocalSpec::item_block(layout, 2).unwrap();
    let ml = fit.estimate.flatten();
    let error = |h: f64| {
        let mut moved = ml.clone();
        for (m, &c) in spec.indices.iter().enumerate() {
            moved[c] += h * if m % 2 == 0 { 1.0 } else { -0.5 };
        }
        let params = ParamVector::from_flat(layout, &moved).unwrap();
        let ctx = InferenceContext::at(&params, &fit.penalty.fixed_zero_mask, 49, &data, hessian_gram()).unwrap();
        let report = ctx.one_step_debias(&spec, 0.0, 0.05).unwrap();
        spec.indices.iter().zip(&report.debiased).map(|(&c, d)| (d - ml[c]).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (error(0.04), error(0.02));
    assert!(e1 < 5e-3, "error {e1:.3e} at h = 0.04");
    assert!(e2 < e1 / 3.0, "errors {e1:.3e}, {e2:.3e} do not shrink quadratically");
}

#[test]
fn debias_intervals_are_ordered_and_use_the_reported_se() {
    let data = table2(500, DifCondition::Quarter, 9);
    let lambda = select_lambda(500, 0.6883).unwrap();
    let fit = penalized_em_fit(&data, &PenaltyConfig::lasso(Layout::new(12, 3), lambda), &EmConfig::default()).unwrap();
    let ctx = InferenceContext::new(&fit, &data, InferenceOptions::default()).unwrap();
    for item in 0..12 {
        let report = ctx.one_step_debias(&FocalSpec::item_block(fit.layout(), item).unwrap(), lambda, 0.05).unwrap();
        for m in 0..report.debiased.len() {
            assert!(report.se[m] > 0.0);
            assert!(report.ci_lower[m] < report.ci_upper[m]);
            let half = (report.ci_upper[m] - report.ci_lower[m]) / 2.0;
            assert!((half - 1.959963984540054 * report.se[m]).abs() < 1e-12);
        }
        let test = ctx.dscore_test(&FocalSpec::item_dif(fit.layout(), item).unwrap(), lambda).unwrap();
        assert!(test.statistic >= 0.0 && test.df == 6);
        assert!((0.0..=1.0).contains(&test.p_value));
    }
}

#[test]
fn wald_statistic_is_zero_at_a_zero_estimate() {
    let (data, fit) = identified_fit(11);
    let layout = fit.layout();
    let mut flat = fit.estimate.flatten();
    for c in layout.dif_block(2) {
        flat[c] = 0.0;
    }
    let params = ParamVector::from_flat(layout, &flat).unwrap();
    let ctx = InferenceContext::at(&params, &fit.penalty.fixed_zero_mask, 49, &data, InferenceOptions::default()).unwrap();
    let report = ctx.wald_test(&layout.dif_block(2), "item 3", &ctx.free_covariance().unwrap()).unwrap();
    assert_eq!(report.statistic, 0.0);
    assert_eq!(report.p_value, 1.0);
    assert!(ctx.wald_test(&layout.dif_block(0), "anchor", &ctx.free_covariance().unwrap()).is_err());
}

#[test]
fn oracle_wald_has_two_k_degrees_of_freedom() {
    let data = table2(800, DifCondition::Quarter, 12);
    let report = wald_test_oracle(&data, &[10, 11], 0, &EmConfig::default()).unwrap();
    assert_eq!(report.df, 6);
    assert!(report.statistic > 0.0);
    assert!((report.p_value - chi_square_sf(report.statistic, 6).unwrap()).abs() < 1e-15);
    assert!(wald_test_oracle(&data, &[10, 11], 10, &EmConfig::default()).is_err());
    assert!(wald_test_oracle(&data, &[], 0, &EmConfig::default()).is_err());
}
