use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use regdif_core::em::{penalized_em_fit, select_lambda, EmConfig, PenaltyConfig};
use regdif_core::inference::{confidence_interval, FocalSpec, HessianMethod, InferenceContext, InferenceOptions, ProjectionGram};
use regdif_core::simulation::{
    format_value, generate_dataset, replication_rng, run_study, DifCondition, ReplicationRecord, StudyConfig, TrueModel,
};
use regdif_core::Layout;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::files::{create_dir, read_dataset, read_json, to_json, write_covariates, write_json, write_responses};
use crate::formats::{CoordinateReport, FitFile, TestMethod, TestReport};
use crate::manifest::ManifestBuilder;

/// Environment variable that overrides the seed of `generate` and `simulate`.
pub const SEED_ENV: &str = "REGDIF_SEED";

#[derive(Debug, Parser)]
#[command(name = "regdif", version, about = "Penalized DIF estimation, decorrelated score tests and simulation studies")]
pub struct Cli {
    /// Worker threads (defaults to the number of available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset from the built-in true model.
    Generate(GenerateArgs),
    /// Fit the penalized model to a dataset.
    Fit(FitArgs),
    /// Test DIF effects of a fitted model.
    Test(TestArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    /// Percentage of DIF items: 0, 25 or 50.
    #[arg(long, default_value_t = 0)]
    pub condition: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub covariates: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("penalty").required(true).args(["lambda", "lambda_constant"])))]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fixed penalty weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Penalty weight `c / sqrt(n)`.
    #[arg(long)]
    pub lambda_constant: Option<f64>,
    /// Items (1-based) whose DIF effects are fixed at zero.
    #[arg(long, value_delimiter = ',')]
    pub anchor: Vec<usize>,
    /// Further coordinates fixed at zero, by name.
    #[arg(long, value_delimiter = ',')]
    pub fix: Vec<String>,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub em_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub mstep_tol: f64,
    /// Quadrature nodes.
    #[arg(long, default_value_t = 49)]
    pub quadrature: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GramArg {
    ScoreOuterProduct,
    Hessian,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["item", "coord"])))]
pub struct TestArgs {
    /// fit.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Item (1-based) whose DIF block is tested.
    #[arg(long)]
    pub item: Option<usize>,
    /// Single coordinate to test, e.g. `item3_beta1_gender`.
    #[arg(long)]
    pub coord: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = TestMethod::Dscore)]
    pub method: TestMethod,
    /// Penalty of the decorrelation lasso; defaults to the fit's lambda.
    #[arg(long)]
    pub lambda_prime: Option<f64>,
    #[arg(long, value_enum, default_value_t = GramArg::ScoreOuterProduct)]
    pub gram: GramArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Study configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Seed after applying the `REGDIF_SEED` override.
pub fn effective_seed(seed: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Test(a) => cmd_test(&a),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
    })
}

/// Writes `responses.csv`, `covariates.csv` and `truth.json`. The dataset
/// is replication 0 of the matching simulation cell.
pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    let manifest = ManifestBuilder::start("generate");
    let condition = DifCondition::from_percent(args.condition)?;
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let seed = effective_seed(args.seed)?;
    let truth = TrueModel::new(condition);
    let data = generate_dataset(args.n, &truth, &mut replication_rng(seed, args.n, condition, 0))?;
    create_dir(&args.out)?;
    write_responses(&args.out.join("responses.csv"), &data)?;
    write_covariates(&args.out.join("covariates.csv"), &data)?;
    write_json(&args.out.join("truth.json"), &truth)?;
    let outputs = ["responses.csv", "covariates.csv", "truth.json"].map(String::from);
    manifest.finish(&args.out, json!({ "n": args.n, "condition": args.condition }), Some(seed), &outputs)?;
    println!("wrote {} persons to {}", args.n, args.out.display());
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start("fit");
    manifest.input(&args.data.responses)?;
    manifest.input(&args.data.covariates)?;
    let data = read_dataset(&args.data.responses, &args.data.covariates)?;
    let layout = Layout::new(data.n_items(), data.n_covariates());
    let lambda = match (args.lambda, args.lambda_constant) {
        (Some(l), None) => l,
        (None, Some(c)) => select_lambda(data.n_persons(), c)?,
        _ => return Err(CliError::Usage("give exactly one of --lambda and --lambda-constant".into())),
    };
    let mut fixed = Vec::new();
    for &a in &args.anchor {
        if a == 0 || a > layout.n_items {
            return Err(CliError::Usage(format!("anchor {a} outside 1..={}", layout.n_items)));
        }
        fixed.extend(layout.dif_block(a - 1));
    }
    for name in &args.fix {
        let idx = layout
            .index_of(name, data.covariate_names())
            .ok_or_else(|| CliError::Usage(format!("unknown coordinate {name}")))?;
        fixed.push(idx);
    }
    let penalty = PenaltyConfig::lasso(layout, lambda).with_fixed_zero(&fixed);
    let config =
        EmConfig { max_iter: args.max_iter, em_tol: args.em_tol, mstep_tol: args.mstep_tol, quadrature_q: args.quadrature, start: None };
    let fit = penalized_em_fit(&data, &penalty, &config)?;
    if !fit.converged {
        eprintln!("warning: EM stopped after {} iterations without converging", fit.iterations);
    }
    let file = FitFile::from_fit(&fit, data.covariate_names(), args.lambda_constant);
    create_dir(&args.out)?;
    write_json(&args.out.join("fit.json"), &file)?;
    let settings = json!({
        "lambda": lambda,
        "lambda_constant": args.lambda_constant,
        "anchor": args.anchor,
        "fix": args.fix,
        "em": config,
    });
    manifest.finish(&args.out, settings, None, &["fit.json".to_string()])?;
    println!(
        "lambda {lambda:.6}, {} iterations, loss {:.6}, DIF items {:?}",
        fit.iterations,
        fit.final_loss,
        fit.selected_items().iter().map(|j| j + 1).collect::<Vec<_>>()
    );
    Ok(())
}

/// Runs the requested test against a fit and its data.
pub fn test_report(args: &TestArgs, file: &FitFile, data: &regdif_core::Dataset) -> CliResult<TestReport> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let fit = file.to_fit()?;
    let layout = fit.layout();
    if data.n_items() != layout.n_items || data.covariate_names() != file.covariates.as_slice() {
        return Err(CliError::Usage(format!(
            "fit has {} items and covariates {:?}; data has {} items and covariates {:?}",
            layout.n_items,
            file.covariates,
            data.n_items(),
            data.covariate_names()
        )));
    }
    let spec = match (args.item, &args.coord) {
        (Some(j), None) if j >= 1 && j <= layout.n_items => FocalSpec::item_dif(layout, j - 1)?,
        (Some(j), None) => return Err(CliError::Usage(format!("--item {j} outside 1..={}", layout.n_items))),
        (None, Some(name)) => {
            let idx = layout.index_of(name, &file.covariates).ok_or_else(|| CliError::Usage(format!("unknown coordinate {name}")))?;
            FocalSpec::coordinate(layout, idx, &file.covariates)?
        }
        _ => return Err(CliError::Usage("give exactly one of --item and --coord".into())),
    };
    let target = match args.item {
        Some(j) => format!("item{j}"),
        None => spec.label.clone(),
    };
    let gram = match args.gram {
        GramArg::ScoreOuterProduct => ProjectionGram::ScoreOuterProduct,
        GramArg::Hessian => ProjectionGram::Hessian,
    };
    let ctx = InferenceContext::new(&fit, data, InferenceOptions { gram, hessian: HessianMethod::Analytic })?;
    let names = layout.names(&file.covariates);
    match args.method {
        TestMethod::Dscore => {
            let lambda_prime = args.lambda_prime.unwrap_or(fit.lambda);
            let test = ctx.dscore_test(&spec, lambda_prime)?;
            let debias = ctx.one_step_debias(&spec, lambda_prime, args.alpha)?;
            let coordinates = (0..spec.d0())
                .map(|m| CoordinateReport {
                    name: names[spec.indices[m]].clone(),
                    estimate: debias.estimate[m],
                    debiased: Some(debias.debiased[m]),
                    se: debias.se[m],
                    ci_lower: debias.ci_lower[m],
                    ci_upper: debias.ci_upper[m],
                })
                .collect();
            Ok(TestReport {
                target,
                method: TestMethod::Dscore,
                statistic: test.statistic,
                df: test.df,
                p_value: test.p_value,
                alpha: args.alpha,
                reject: test.p_value < args.alpha,
                lambda_prime: Some(lambda_prime),
                coordinates,
            })
        }
        TestMethod::Wald => {
            if fit.lambda != 0.0 && fit.penalty.penalized_mask.iter().any(|&p| p) {
                return Err(CliError::Usage("Wald tests need an unpenalized fit (--lambda 0)".into()));
            }
            if let Some(&c) = spec.indices.iter().find(|&&c| fit.penalty.fixed_zero_mask[c]) {
                return Err(CliError::Usage(format!("{} is fixed at zero in this fit and cannot be tested", names[c])));
            }
            let cov = ctx.free_covariance()?;
            let wald = ctx.wald_test(&spec.indices, &spec.label, &cov)?;
            let coordinates = (0..spec.d0())
                .map(|m| {
                    let (lo, hi) = confidence_interval(wald.estimate[m], wald.se[m], args.alpha)?;
                    Ok(CoordinateReport {
                        name: names[spec.indices[m]].clone(),
                        estimate: wald.estimate[m],
                        debiased: None,
                        se: wald.se[m],
                        ci_lower: lo,
                        ci_upper: hi,
                    })
                })
                .collect::<CliResult<_>>()?;
            Ok(TestReport {
                target,
                method: TestMethod::Wald,
                statistic: wald.statistic,
                df: wald.df,
                p_value: wald.p_value,
                alpha: args.alpha,
                reject: wald.p_value < args.alpha,
                lambda_prime: None,
                coordinates,
            })
        }
    }
}

pub fn cmd_test(args: &TestArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start("test");
    manifest.input(&args.fit)?;
    manifest.input(&args.data.responses)?;
    manifest.input(&args.data.covariates)?;
    let file: FitFile = read_json(&args.fit)?;
    let data = read_dataset(&args.data.responses, &args.data.covariates)?;
    let report = test_report(args, &file, &data)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    let settings = json!({
        "item": args.item,
        "coord": args.coord,
        "alpha": args.alpha,
        "method": args.method,
        "lambda_prime": report.lambda_prime,
    });
    manifest.finish(&args.out, settings, None, &["report.json".to_string()])?;
    println!("{}: statistic {:.4}, df {}, p {}", report.target, report.statistic, report.df, format_value(Some(report.p_value)));
    Ok(())
}

/// File name of one replication record.
pub fn record_file_name(r: &ReplicationRecord) -> String {
    format!("n{}_dif{}_rep{:05}.json", r.n, r.dif_condition, r.replication)
}

/// Problems a study recorded without failing: failed methods and items
/// without a decision.
pub fn count_warnings(records: &[ReplicationRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| &r.methods)
        .map(|m| if m.ok() { m.items.iter().filter(|i| i.flagged.is_none()).count() } else { 1 })
        .sum()
}

/// Runs a study and writes `metrics.csv`, `records/` and the manifest.
/// Returns the number of warnings.
pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<usize> {
    let mut manifest = ManifestBuilder::start("simulate");
    manifest.input(&args.config)?;
    let mut config: StudyConfig = read_json(&args.config)?;
    config.seed = effective_seed(config.seed)?;
    config.validate()?;
    let records_dir = args.out.join("records");
    prepare_records_dir(&records_dir)?;
    let output = run_study(&config)?;
    let mut outputs = vec!["metrics.csv".to_string()];
    for r in &output.records {
        let name = record_file_name(r);
        write_json(&records_dir.join(&name), r)?;
        outputs.push(format!("records/{name}"));
    }
    let metrics = args.out.join("metrics.csv");
    std::fs::write(&metrics, output.metrics.to_csv()).map_err(|e| CliError::io(&metrics, e))?;
    let snapshot = serde_json::from_str(&to_json(&config)?).map_err(|e| CliError::Usage(e.to_string()))?;
    manifest.finish(&args.out, snapshot, Some(config.seed), &outputs)?;
    let warnings = count_warnings(&output.records);
    if warnings > 0 {
        eprintln!("warning: {warnings} method or item results are missing; see the records for details");
    }
    println!("wrote {} replication records and {} metric rows to {}", output.records.len(), output.metrics.rows.len(), args.out.display());
    Ok(warnings)
}

/// Creates the records directory, refusing to mix with an earlier run.
fn prepare_records_dir(dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    let stale = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_some();
    if stale {
        return Err(CliError::Usage(format!("{} is not empty; choose a fresh output directory", dir.display())));
    }
    Ok(())
}
