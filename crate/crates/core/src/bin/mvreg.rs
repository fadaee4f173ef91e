//! `mvreg`: simulate, fit, test, prune and run Monte Carlo experiments for
//! multidimensional regression models.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mvreg::data::Standardization;
use mvreg::estimate::{fit_fgls, fit_gls, fit_logdet, fit_ols, FglsTrace, FitResult};
use mvreg::inference::{
    check_nested, mc_null_calibrate, mc_test, size_experiment, sn_statistic, tn_statistic, tn_test, StatKind,
};
use mvreg::optimize::{OptimOptions, StartRecord};
use mvreg::prune::{ssm_prune, PruneStep};
use mvreg::rng::{stream_rng, Stream};
use mvreg::simulate::{gen_series, run_mc, nar_mlp_recipe, Estimator, McOptions, SimMode, SimRecipe, SCHEMA_VERSION};
use mvreg::{Dataset, Error, ModelFile, ModelSpec, Result, SpdMatrix};

#[derive(Parser, Debug)]
#[command(name = "mvreg", version, about = "Log-determinant estimation for multidimensional regression")]
struct Cli {
    /// Master seed of every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model JSON file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Data CSV file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset and the recipe that replays it.
    Simulate(SimulateArgs),
    /// Fit a model to data.
    Fit(FitArgs),
    /// Test a restricted model against a full one.
    Test(TestArgs),
    /// Stepwise pruning with the penalized log-determinant criterion.
    Prune(PruneArgs),
    /// Monte Carlo experiments.
    Mc(McArgs),
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Random restarts.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    starts: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: u64,
    /// Infinity-norm gradient tolerance.
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
}

impl OptimArgs {
    fn options(&self, seed: u64) -> Result<OptimOptions> {
        let opts = OptimOptions {
            max_iters: self.max_iters as usize,
            grad_tol: self.grad_tol,
            n_starts: self.starts as usize,
            seed,
            ..OptimOptions::default()
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Nar,
    Iid,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "nar")]
    mode: ModeArg,
    /// Noise covariance, rows separated by ';' and entries by ','
    /// (default: identity).
    #[arg(long)]
    gamma: Option<String>,
    /// Number of emitted observations.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    /// Discarded initial steps of a NAR series (default 100; 0 starts the
    /// output at the initial state).
    #[arg(long)]
    burn_in: Option<usize>,
    /// Replay a recipe JSON instead of building one from flags.
    #[arg(long, conflicts_with_all = ["gamma", "n", "burn_in"])]
    recipe: Option<PathBuf>,
    /// Bounds of the uniform input law (i.i.d. inputs, exogenous columns).
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    input_low: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    input_high: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CostArg {
    Mse,
    Gls,
    Logdet,
    Fgls,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_enum, default_value = "logdet")]
    cost: CostArg,
    /// GLS weight: `identity` or an inline matrix.
    #[arg(long)]
    weight: Option<String>,
    /// Centre and scale every column before fitting.
    #[arg(long)]
    standardize: bool,
    /// Maximum FGLS rounds, the OLS round included.
    #[arg(long, default_value_t = 10)]
    max_rounds: usize,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TestCostArg {
    Logdet,
    Mse,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[arg(long)]
    restricted: PathBuf,
    #[arg(long)]
    full: PathBuf,
    /// `logdet` gives T_n, `mse` gives S_n (needs --calibrate).
    #[arg(long, value_enum, default_value = "logdet")]
    cost: TestCostArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Monte Carlo null replications.
    #[arg(long)]
    calibrate: Option<usize>,
    /// Recipe generating data under the null (restricted model).
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Also require the removal not to be rejected by T_n at this level.
    #[arg(long)]
    gate: Option<f64>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PresetArg {
    NarMlp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ExperimentArg {
    /// Fit every estimator on every replication and compare.
    Ensemble,
    /// Empirical size of the chi-square T_n test.
    TestSize,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long, value_enum, conflicts_with = "recipe")]
    preset: Option<PresetArg>,
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Comma separated: mse, logdet, fgls, gls_true.
    #[arg(long, default_value = "logdet,mse")]
    estimators: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, value_enum, default_value = "ensemble")]
    experiment: ExperimentArg,
    /// Restricted model of a test-size experiment (default: the recipe model).
    #[arg(long)]
    restricted: Option<PathBuf>,
    /// Full model of a test-size experiment.
    #[arg(long)]
    full: Option<PathBuf>,
    /// Omit per-replication records from the report.
    #[arg(long)]
    summary_only: bool,
    #[command(flatten)]
    optim: OptimArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Test(a) => cmd_test(cli, a),
        Command::Prune(a) => cmd_prune(cli, a),
        Command::Mc(a) => cmd_mc(cli, a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn read_model(path: &Path) -> Result<(ModelFile, ModelSpec)> {
    let file: ModelFile = read_json(path)?;
    let spec = file.spec()?;
    Ok((file, spec))
}

fn emit(out: &Option<PathBuf>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Rows separated by ';', entries by ','.
fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad matrix entry '{}'", v.trim())))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(usage(format!("matrix '{text}' is not square")));
    }
    Ok(rows)
}

fn parse_spd(text: &str) -> Result<SpdMatrix> {
    SpdMatrix::from_rows(&parse_matrix(text)?).map_err(|e| usage(format!("matrix '{text}': {e}")))
}

fn recipe_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.recipe.json"))
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let recipe = match &a.recipe {
        Some(path) => read_json::<SimRecipe>(path)?,
        None => {
            let (file, spec) = read_model(require(&cli.model, "--model")?)?;
            let n = a.n.ok_or_else(|| usage("--n is required"))? as usize;
            let w = match file.params(&spec)? {
                Some(w) => w,
                None => spec.random_params(&mut stream_rng(cli.seed, Stream::Weights, 0), -2.0, 2.0),
            };
            let gamma0 = match &a.gamma {
                Some(g) => parse_spd(g)?,
                None => SpdMatrix::identity(spec.output_dim()),
            };
            let mode = match a.mode {
                ModeArg::Nar => SimMode::NarProcess,
                ModeArg::Iid => SimMode::IidRegression,
            };
            let mut recipe = SimRecipe::new(mode, &spec, &w, gamma0, n, cli.seed)
                .with_input_range(a.input_low, a.input_high);
            if let Some(b) = a.burn_in {
                recipe = recipe.with_burn_in(b);
            }
            recipe
        }
    };
    let data = gen_series(&recipe)?;
    match &cli.out {
        Some(out) => {
            data.write_csv(out)?;
            emit(&Some(recipe_path(out)), &recipe)?;
        }
        None => print!("{}", data.to_csv()),
    }
    Ok(())
}

fn load_data(cli: &Cli, spec: &ModelSpec) -> Result<Dataset> {
    let data = Dataset::read_csv(require(&cli.data, "--data")?)?;
    if data.input_dim() != spec.input_dim() || data.output_dim() != spec.output_dim() {
        return Err(usage(format!(
            "data has {} input and {} output columns, model expects {} and {}",
            data.input_dim(),
            data.output_dim(),
            spec.input_dim(),
            spec.output_dim()
        )));
    }
    Ok(data)
}

#[derive(Serialize)]
struct FitReport<'a> {
    schema_version: &'static str,
    cost: &'static str,
    model: ModelFile,
    n: usize,
    w_hat: &'a [f64],
    cost_value: f64,
    logdet: f64,
    gamma_hat: Vec<Vec<f64>>,
    info_hat: Option<Vec<Vec<f64>>>,
    asymptotic_cov: Option<Vec<Vec<f64>>>,
    identifiable: bool,
    converged: bool,
    per_start: &'a [StartRecord],
    #[serde(skip_serializing_if = "Option::is_none")]
    fgls_trace: Option<&'a FglsTrace>,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<&'a Standardization>,
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn fit_report<'a>(
    cost: &'static str,
    fit: &'a FitResult,
    trace: Option<&'a FglsTrace>,
    standardization: Option<&'a Standardization>,
) -> FitReport<'a> {
    FitReport {
        schema_version: SCHEMA_VERSION,
        cost,
        model: ModelFile::from_spec(&fit.spec, Some(&fit.w_hat)),
        n: fit.n,
        w_hat: fit.w_hat.as_slice(),
        cost_value: fit.cost_value,
        logdet: fit.logdet_value(),
        gamma_hat: fit.gamma_hat.to_rows(),
        info_hat: fit.info_hat.as_ref().map(SpdMatrix::to_rows),
        asymptotic_cov: fit.asymptotic_cov.as_ref().map(matrix_rows),
        identifiable: fit.identifiable,
        converged: fit.optim.converged,
        per_start: &fit.optim.per_start,
        fgls_trace: trace,
        standardization,
    }
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<()> {
    let (_, spec) = read_model(require(&cli.model, "--model")?)?;
    let mut data = load_data(cli, &spec)?;
    let mut standardization = None;
    if a.standardize {
        let (s, tr) = data.standardize();
        data = s;
        standardization = Some(tr);
    }
    let opts = a.optim.options(cli.seed)?;
    let (name, fit, trace) = match a.cost {
        CostArg::Mse => ("mse", fit_ols(&spec, &data, &opts)?, None),
        CostArg::Logdet => ("logdet", fit_logdet(&spec, &data, &opts)?, None),
        CostArg::Fgls => {
            let (fit, trace) = fit_fgls(&spec, &data, &opts, a.max_rounds, 1e-8)?;
            ("fgls", fit, Some(trace))
        }
        CostArg::Gls => {
            let weight = match a.weight.as_deref() {
                None | Some("identity") => SpdMatrix::identity(spec.output_dim()),
                Some(m) => parse_spd(m)?,
            };
            ("gls", fit_gls(&spec, &data, &weight, &opts)?, None)
        }
    };
    emit(&cli.out, &fit_report(name, &fit, trace.as_ref(), standardization.as_ref()))
}

fn cmd_test(cli: &Cli, a: &TestArgs) -> Result<()> {
    let (_, restricted) = read_model(&a.restricted)?;
    let (_, full) = read_model(&a.full)?;
    let dof = check_nested(&restricted, &full)?;
    let data = load_data(cli, &full)?;
    let opts = a.optim.options(cli.seed)?;
    let (kind, fr, ff) = match a.cost {
        TestCostArg::Logdet => (StatKind::Tn, fit_logdet(&restricted, &data, &opts)?, fit_logdet(&full, &data, &opts)?),
        TestCostArg::Mse => (StatKind::Sn, fit_ols(&restricted, &data, &opts)?, fit_ols(&full, &data, &opts)?),
    };
    let report = match a.calibrate {
        None => {
            if kind == StatKind::Sn {
                return Err(usage("the S_n statistic (--cost mse) needs --calibrate R and --recipe"));
            }
            tn_test(&fr, &ff, a.alpha)?
        }
        Some(reps) => {
            let recipe: SimRecipe = read_json(require(&a.recipe, "--recipe (with --calibrate)")?)?;
            let null = mc_null_calibrate(kind, &restricted, &full, &recipe.with_n(data.len()), reps, cli.seed, &opts)?;
            let stat = match kind {
                StatKind::Tn => tn_statistic(&fr, &ff)?,
                StatKind::Sn => sn_statistic(&fr, &ff)?,
            };
            mc_test(stat, dof, &null, a.alpha)?
        }
    };
    emit(
        &cli.out,
        &json!({
            "schema_version": SCHEMA_VERSION,
            "statistic_kind": kind,
            "n": data.len(),
            "report": report,
        }),
    )
}

#[derive(Serialize)]
struct PruneReport<'a> {
    schema_version: &'static str,
    n: usize,
    initial_model: ModelFile,
    initial_params: usize,
    initial_criterion: f64,
    steps: &'a [PruneStep],
    final_model: ModelFile,
    final_params: usize,
    final_criterion: f64,
    final_mask: Vec<bool>,
    final_logdet: f64,
}

fn cmd_prune(cli: &Cli, a: &PruneArgs) -> Result<()> {
    let (_, spec) = read_model(require(&cli.model, "--model")?)?;
    let data = load_data(cli, &spec)?;
    if let Some(g) = a.gate {
        if !(g > 0.0 && g < 1.0) {
            return Err(usage("--gate must lie in (0, 1)"));
        }
    }
    let trace = ssm_prune(&spec, &data, &a.optim.options(cli.seed)?, a.gate)?;
    let report = PruneReport {
        schema_version: SCHEMA_VERSION,
        n: data.len(),
        initial_model: ModelFile::from_spec(&trace.initial_spec, None),
        initial_params: trace.initial_spec.param_count(),
        initial_criterion: trace.initial_criterion,
        steps: &trace.steps,
        final_model: ModelFile::from_spec(&trace.final_spec, Some(&trace.final_fit.w_hat)),
        final_params: trace.final_spec.param_count(),
        final_criterion: trace.steps.last().map_or(trace.initial_criterion, |s| s.criterion_after),
        final_mask: trace.final_spec.full_mask(),
        final_logdet: trace.final_fit.logdet_value(),
    };
    emit(&cli.out, &report)?;
    let summary = format!("q: {} → {}", report.initial_params, report.final_params);
    if cli.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn cmd_mc(cli: &Cli, a: &McArgs) -> Result<()> {
    if a.reps < 2 {
        return Err(usage("--reps must be at least 2"));
    }
    let recipe = match (&a.preset, &a.recipe) {
        (Some(PresetArg::NarMlp), _) => nar_mlp_recipe(cli.seed),
        (None, Some(p)) => read_json::<SimRecipe>(p)?,
        (None, None) => return Err(usage("mc needs --preset or --recipe")),
    };
    let opts = a.optim.options(cli.seed)?;
    match a.experiment {
        ExperimentArg::Ensemble => {
            let estimators: Vec<Estimator> =
                a.estimators.split(',').map(str::parse).collect::<Result<_>>()?;
            let mut report = run_mc(&recipe, &estimators, &McOptions::new(a.reps, cli.seed, opts))?;
            if a.summary_only {
                report.replications.clear();
            }
            emit(&cli.out, &report)
        }
        ExperimentArg::TestSize => {
            let restricted = match &a.restricted {
                Some(p) => read_model(p)?.1,
                None => recipe.spec()?,
            };
            let full = read_model(require(&a.full, "--full")?)?.1;
            let null = mc_null_calibrate(StatKind::Tn, &restricted, &full, &recipe, a.reps, cli.seed, &opts)?;
            emit(&cli.out, &size_experiment(&null, &[0.01, 0.05, 0.10])?)
        }
    }
}
