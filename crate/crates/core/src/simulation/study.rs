use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::{penalized_em_fit, select_lambda, EmConfig, FitResult, PenaltyConfig};
use crate::error::{Error, Result};
use crate::inference::{FocalSpec, InferenceContext, InferenceOptions};
use crate::params::Layout;

use super::generate::generate_dataset;
use super::metrics::{aggregate, MetricTable};
use super::truth::{DifCondition, TrueModel, N_ITEMS};

/// DIF detection methods compared by the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Lasso selection: an item is flagged when any DIF effect is nonzero.
    RegDif,
    /// Unpenalized refit of the selected model with per-item Wald tests.
    Refit,
    /// Decorrelated score tests and one-step debiased estimates.
    Dscore,
    /// Wald tests in the model with known anchor items.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RegDif, Method::Refit, Method::Dscore, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::RegDif => "reg-dif",
            Method::Refit => "refit",
            Method::Dscore => "dscore",
            Method::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// EM settings of the study fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub max_iter: usize,
    pub em_tol: f64,
    pub mstep_tol: f64,
    pub quadrature_q: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        let d = EmConfig::default();
        Self { max_iter: d.max_iter, em_tol: d.em_tol, mstep_tol: d.mstep_tol, quadrature_q: d.quadrature_q }
    }
}

impl EmSettings {
    pub fn to_config(&self) -> EmConfig {
        EmConfig { max_iter: self.max_iter, em_tol: self.em_tol, mstep_tol: self.mstep_tol, quadrature_q: self.quadrature_q, start: None }
    }
}

/// Monte Carlo design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub sample_sizes: Vec<usize>,
    /// DIF conditions in percent: 0, 25 or 50.
    pub dif_conditions: Vec<u32>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    /// Tuning constant `c` per DIF condition (percent as key); missing
    /// conditions use the defaults.
    #[serde(default)]
    pub lambda_constants: BTreeMap<u32, f64>,
    /// Fixed lambda for every fit, replacing the `c / sqrt(n)` rule.
    #[serde(default)]
    pub lambda_override: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Anchor items of the oracle method, 1-based.
    #[serde(default = "default_anchors")]
    pub oracle_anchors: Vec<usize>,
    /// Index of the first replication; lets a study be split into batches
    /// that reproduce the same datasets.
    #[serde(default)]
    pub first_replication: usize,
    #[serde(default)]
    pub em: EmSettings,
    #[serde(default)]
    pub inference: InferenceOptions,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_alpha() -> f64 {
    0.05
}

fn default_anchors() -> Vec<usize> {
    vec![11, 12]
}

impl StudyConfig {
    pub fn new(sample_sizes: Vec<usize>, dif_conditions: Vec<u32>, replications: usize, seed: u64) -> Self {
        Self {
            sample_sizes,
            dif_conditions,
            replications,
            seed,
            methods: all_methods(),
            lambda_constants: BTreeMap::new(),
            lambda_override: None,
            alpha: default_alpha(),
            oracle_anchors: default_anchors(),
            first_replication: 0,
            em: EmSettings::default(),
            inference: InferenceOptions::default(),
        }
    }

    pub fn with_methods(mut self, methods: &[Method]) -> Self {
        self.methods = methods.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("sample sizes must be a nonempty list of positive integers".into()));
        }
        if self.dif_conditions.is_empty() {
            return Err(Error::InvalidArgument("at least one DIF condition is required".into()));
        }
        for &p in self.dif_conditions.iter().chain(self.lambda_constants.keys()) {
            DifCondition::from_percent(p)?;
        }
        if self.lambda_constants.values().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument("lambda constants must be positive".into()));
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda override must be nonnegative, got {l}")));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("at least one method is required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.methods.contains(&Method::Oracle)
            && (self.oracle_anchors.is_empty() || self.oracle_anchors.iter().any(|&a| a == 0 || a > N_ITEMS))
        {
            return Err(Error::InvalidArgument(format!("oracle anchors must be nonempty item numbers in 1..={N_ITEMS}")));
        }
        if self.sample_sizes.iter().any(|&n| n >= 1 << 24) || self.first_replication + self.replications >= 1 << 32 {
            return Err(Error::InvalidArgument("sample size or replication index too large".into()));
        }
        self.em.to_config().validate()
    }

    pub fn lambda(&self, n: usize, condition: DifCondition) -> Result<f64> {
        if let Some(l) = self.lambda_override {
            return Ok(l);
        }
        let c = self.lambda_constants.get(&condition.percent()).copied().unwrap_or(condition.default_lambda_constant());
        select_lambda(n, c)
    }

    /// `(n, condition)` cells in configuration order.
    pub fn cells(&self) -> Result<Vec<(usize, DifCondition)>> {
        let mut cells = Vec::new();
        for &n in &self.sample_sizes {
            for &p in &self.dif_conditions {
                cells.push((n, DifCondition::from_percent(p)?));
            }
        }
        Ok(cells)
    }
}

/// Stream id of one replication: the ChaCha stream is keyed by sample
/// size, condition and replication index so that a dataset does not depend
/// on which other cells or how many workers a study uses.
pub fn replication_stream(n: usize, condition: DifCondition, replication: usize) -> u64 {
    ((n as u64) << 40) | (u64::from(condition.percent()) << 32) | replication as u64
}

/// Random generator of one replication.
pub fn replication_rng(seed: u64, n: usize, condition: DifCondition, replication: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replication_stream(n, condition, replication));
    rng
}

/// Outcome of one item under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    /// 1-based item number.
    pub item: usize,
    /// `None` when the method reached no decision for the item.
    pub flagged: Option<bool>,
    pub statistic: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
    /// Why the item has no test result, if it has none.
    pub note: Option<String>,
}

/// Estimate and standard error of one coordinate under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRecord {
    pub name: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
}

/// Everything one method produced in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    /// `None` on success, the error message otherwise.
    pub error: Option<String>,
    pub items: Vec<ItemRecord>,
    pub coordinates: Vec<CoordinateRecord>,
}

impl MethodRecord {
    fn failed(method: Method, err: &Error) -> Self {
        Self { method, error: Some(err.to_string()), items: Vec::new(), coordinates: Vec::new() }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Summary of a model fit inside a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub label: String,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
}

impl FitSummary {
    fn of(label: &str, fit: &FitResult) -> Self {
        Self { label: label.into(), lambda: fit.lambda, iterations: fit.iterations, converged: fit.converged, final_loss: fit.final_loss }
    }
}

/// One replication of one design cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub dif_condition: u32,
    pub replication: usize,
    pub seed: u64,
    pub stream: u64,
    pub lambda: f64,
    pub fits: Vec<FitSummary>,
    pub methods: Vec<MethodRecord>,
}

impl ReplicationRecord {
    pub fn method(&self, method: Method) -> Option<&MethodRecord> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Runs the configured methods on one freshly generated dataset.
pub fn run_replication(config: &StudyConfig, n: usize, condition: DifCondition, replication: usize) -> Result<ReplicationRecord> {
    config.validate()?;
    let truth = TrueModel::new(condition);
    let mut rng = replication_rng(config.seed, n, condition, replication);
    let data = generate_dataset(n, &truth, &mut rng)?;
    let lambda = config.lambda(n, condition)?;
    let em = config.em.to_config();
    let layout = Layout::new(N_ITEMS, 3);
    let names = layout.names(data.covariate_names());

    let mut fits = Vec::new();
    let mut methods = Vec::new();
    let wants = |m: Method| config.methods.contains(&m);

    if wants(Method::RegDif) || wants(Method::Refit) || wants(Method::Dscore) {
        match penalized_em_fit(&data, &PenaltyConfig::lasso(layout, lambda), &em) {
            Ok(fit) => {
                fits.push(FitSummary::of("penalized", &fit));
                if wants(Method::RegDif) {
                    methods.push(reg_dif_record(&fit, &names));
                }
                if wants(Method::Refit) {
                    let (rec, summary) = refit_record(&fit, &data, &em, config, &names);
                    fits.extend(summary);
                    methods.push(rec);
                }
                if wants(Method::Dscore) {
                    methods.push(dscore_record(&fit, &data, lambda, config, &names));
                }
            }
            Err(e) => {
                for m in [Method::RegDif, Method::Refit, Method::Dscore] {
                    if wants(m) {
                        methods.push(MethodRecord::failed(m, &e));
                    }
                }
            }
        }
    }
    if wants(Method::Oracle) {
        let (rec, summary) = oracle_record(&data, &em, config, &names);
        fits.extend(summary);
        methods.push(rec);
    }
    methods.sort_by_key(|m| m.method);

    Ok(ReplicationRecord {
        n,
        dif_condition: condition.percent(),
        replication,
        seed: config.seed,
        stream: replication_stream(n, condition, replication),
        lambda,
        fits,
        methods,
    })
}

fn reg_dif_record(fit: &FitResult, names: &[String]) -> MethodRecord {
    let items = (0..N_ITEMS)
        .map(|j| ItemRecord { item: j + 1, flagged: Some(fit.estimate.items[j].has_dif()), statistic: None, df: None, p_value: None, note: None })
        .collect();
    let coordinates = fit
        .estimate
        .flatten()
        .into_iter()
        .zip(names)
        .map(|(v, name)| CoordinateRecord { name: name.clone(), estimate: Some(v), se: None })
        .collect();
    MethodRecord { method: Method::RegDif, error: None, items, coordinates }
}

fn refit_record(
    penalized: &FitResult,
    data: &Dataset,
    em: &EmConfig,
    config: &StudyConfig,
    names: &[String],
) -> (MethodRecord, Option<FitSummary>) {
    let layout = penalized.layout();
    let flat = penalized.estimate.flatten();
    let fixed: Vec<bool> = (0..layout.dim()).map(|c| layout.is_dif(c) && flat[c] == 0.0).collect();
    let mut em = em.clone();
    em.start = Some(penalized.estimate.clone());
    let fit = match penalized_em_fit(data, &PenaltyConfig::constrained(layout, fixed.clone()), &em) {
        Ok(fit) => fit,
        Err(e) => return (MethodRecord::failed(Method::Refit, &e), None),
    };
    let summary = FitSummary::of("refit", &fit);
    match wald_record(Method::Refit, &fit, data, config, names, &(0..N_ITEMS).collect::<Vec<_>>()) {
        Ok(rec) => (rec, Some(summary)),
        Err(e) => (MethodRecord::failed(Method::Refit, &e), Some(summary)),
    }
}

fn oracle_record(data: &Dataset, em: &EmConfig, config: &StudyConfig, names: &[String]) -> (MethodRecord, Option<FitSummary>) {
    let layout = Layout::new(N_ITEMS, 3);
    let anchors: Vec<usize> = config.oracle_anchors.iter().map(|a| a - 1).collect();
    let fit = match penalized_em_fit(data, &PenaltyConfig::anchored(layout, &anchors), em) {
        Ok(fit) => fit,
        Err(e) => return (MethodRecord::failed(Method::Oracle, &e), None),
    };
    let summary = FitSummary::of("oracle", &fit);
    let targets: Vec<usize> = (0..N_ITEMS).filter(|j| !anchors.contains(j)).collect();
    match wald_record(Method::Oracle, &fit, data, config, names, &targets) {
        Ok(rec) => (rec, Some(summary)),
        Err(e) => (MethodRecord::failed(Method::Oracle, &e), Some(summary)),
    }
}

/// Per-item Wald tests on the free DIF effects of an unpenalized fit.
fn wald_record(
    method: Method,
    fit: &FitResult,
    data: &Dataset,
    config: &StudyConfig,
    names: &[String],
    targets: &[usize],
) -> Result<MethodRecord> {
    let layout = fit.layout();
    let ctx = InferenceContext::new(fit, data, config.inference)?;
    let cov = ctx.free_covariance()?;
    let fixed = &fit.penalty.fixed_zero_mask;
    let mut items = Vec::with_capacity(targets.len());
    for &j in targets {
        let free: Vec<usize> = layout.dif_block(j).into_iter().filter(|&c| !fixed[c]).collect();
        if free.is_empty() {
            items.push(ItemRecord {
                item: j + 1,
                flagged: Some(false),
                statistic: None,
                df: None,
                p_value: None,
                note: Some("no free DIF effects".into()),
            });
            continue;
        }
        let label = format!("item {} DIF block", j + 1);
        items.push(match ctx.wald_test(&free, &label, &cov) {
            Ok(w) => ItemRecord {
                item: j + 1,
                flagged: Some(w.p_value < config.alpha),
                statistic: Some(w.statistic),
                df: Some(w.df),
                p_value: Some(w.p_value),
                note: None,
            },
            Err(e) => ItemRecord { item: j + 1, flagged: None, statistic: None, df: None, p_value: None, note: Some(e.to_string()) },
        });
    }
    let (free, matrix) = &cov;
    let estimate = ctx.estimate();
    let coordinates = (0..layout.dim())
        .map(|c| {
            let se = free.iter().position(|&f| f == c).map(|p| matrix[(p, p)].sqrt());
            CoordinateRecord { name: names[c].clone(), estimate: Some(estimate[c]), se }
        })
        .collect();
    Ok(MethodRecord { method, error: None, items, coordinates })
}

fn dscore_record(fit: &FitResult, data: &Dataset, lambda: f64, config: &StudyConfig, names: &[String]) -> MethodRecord {
    let layout = fit.layout();
    let ctx = match InferenceContext::new(fit, data, config.inference) {
        Ok(ctx) => ctx,
        Err(e) => return MethodRecord::failed(Method::Dscore, &e),
    };
    let mut items = Vec::with_capacity(N_ITEMS);
    for j in 0..N_ITEMS {
        let result = FocalSpec::item_dif(layout, j).and_then(|spec| ctx.dscore_test(&spec, lambda));
        items.push(match result {
            Ok(r) => ItemRecord {
                item: j + 1,
                flagged: Some(r.p_value < config.alpha),
                statistic: Some(r.statistic),
                df: Some(r.df),
                p_value: Some(r.p_value),
                note: None,
            },
            Err(e) => ItemRecord { item: j + 1, flagged: None, statistic: None, df: None, p_value: None, note: Some(e.to_string()) },
        });
    }
    let mut coordinates: Vec<CoordinateRecord> =
        names.iter().map(|name| CoordinateRecord { name: name.clone(), estimate: None, se: None }).collect();
    let blocks = (0..N_ITEMS).map(|j| FocalSpec::item_block(layout, j)).chain(std::iter::once(FocalSpec::population(layout)));
    for spec in blocks {
        let Ok(debiased) = spec.and_then(|spec| ctx.one_step_debias(&spec, lambda, config.alpha)) else {
            continue;
        };
        for (m, &c) in debiased.indices.iter().enumerate() {
            coordinates[c].estimate = Some(debiased.debiased[m]);
            coordinates[c].se = Some(debiased.se[m]);
        }
    }
    MethodRecord { method: Method::Dscore, error: None, items, coordinates }
}

/// Output of [`run_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub records: Vec<ReplicationRecord>,
    pub metrics: MetricTable,
}

/// Runs every replication of every cell (in parallel on the current rayon
/// pool) and aggregates the metrics. Output order and values do not depend
/// on the number of worker threads.
pub fn run_study(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let cells = config.cells()?;
    let jobs: Vec<(usize, DifCondition, usize)> = cells
        .iter()
        .flat_map(|&(n, c)| (config.first_replication..config.first_replication + config.replications).map(move |r| (n, c, r)))
        .collect();
    let records: Vec<ReplicationRecord> =
        jobs.par_iter().map(|&(n, c, r)| run_replication(config, n, c, r)).collect::<Result<_>>()?;
    let metrics = aggregate(config, &records)?;
    Ok(StudyOutput { records, metrics })
}
