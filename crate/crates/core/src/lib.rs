//! Covariate-moderated item response models (MNLFA) with an L1 penalty on
//! DIF effects, fitted by a penalized Bock-Aitkin EM algorithm, plus
//! decorrelated score tests and one-step debiased estimates for the DIF
//! effects, and a Monte Carlo engine for comparing DIF detection methods.

pub mod data;
pub mod em;
pub mod inference;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod quadrature;
pub mod simulation;

pub use data::Dataset;
pub use error::{Error, Result};
pub use params::{Coordinate, ItemParams, Layout, ParamVector, PopulationParams};
pub use quadrature::{build_quadrature, GaussHermiteRule, QuadratureGrid};
pub use em::{penalized_em_fit, select_lambda, EmConfig, FitFlags, FitResult, PenaltyConfig};
pub use inference::{
    dscore_test, efficient_information, estimate_w, one_step_debias, wald_test_oracle, DebiasReport, DscoreReport, FocalSpec,
    HessianMethod, InferenceContext, InferenceOptions, ProjectionGram, WEstimate, WaldReport,
};
pub use simulation::{run_replication, run_study, DifCondition, Method, MetricTable, StudyConfig, TrueModel};
