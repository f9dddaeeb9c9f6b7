use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sparse_bai::algorithms::XY_TOL;
use sparse_bai::analysis::evaluate_bounds;
use sparse_bai::design::{e_optimal_design, g_optimal_design, xy_allocation, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use sparse_bai::harness::{run_algorithm, run_benchmark, trial_rng, AlgoName, AlgorithmSpec, ExperimentConfig, HyperMode, StreamKind};
use sparse_bai::model::InstanceRecord;
use sparse_bai::sparse::{lasso, threshold, LASSO_MAX_ITERS, LASSO_TOL};
use sparse_bai::{BanditInstance, RegressionProblem, TheoryInputs};

#[derive(Parser)]
#[command(name = "sparse-bai", version, about = "Fixed-budget best-arm identification for sparse linear bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm on an instance JSON and print the outcome.
    Run(RunArgs),
    /// Compute an optimal design for a JSON arm matrix.
    Design(DesignArgs),
    /// Thresholded Lasso estimate from JSON {X, y, lambda_init, lambda_thres}.
    Estimate(InputArg),
    /// Evaluate every applicable error bound for JSON theory inputs.
    Bounds(InputArg),
    /// Run a Monte-Carlo benchmark and write the CSV report.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct InputArg {
    /// Input JSON file; stdin when omitted or `-`.
    input: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_algo)]
    algo: AlgoName,
    /// Total budget.
    #[arg(long = "T")]
    budget: usize,
    /// Phase-one budget for the two-phase algorithms.
    #[arg(long = "T1")]
    t1: Option<usize>,
    #[arg(long)]
    lambda_init: Option<f64>,
    #[arg(long)]
    lambda_thres: Option<f64>,
    /// Tune the penalties by cross-validation instead of the analytical rule.
    #[arg(long)]
    cv: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    input: InputArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignKind {
    E,
    G,
    Xy,
}

#[derive(clap::Args)]
struct DesignArgs {
    #[arg(long, value_enum)]
    kind: DesignKind,
    /// Relative certificate tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[command(flatten)]
    input: InputArg,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reuse one arm set across trials.
    #[arg(long)]
    fixed_instance: bool,
}

fn parse_algo(s: &str) -> Result<AlgoName, String> {
    s.parse().map_err(|e: sparse_bai::Error| e.to_string())
}

fn read_input(input: &InputArg) -> Result<String> {
    let mut text = String::new();
    match input.input.as_deref() {
        None => io::stdin().read_to_string(&mut text).map(|_| ())?,
        Some(p) if p == Path::new("-") => io::stdin().read_to_string(&mut text).map(|_| ())?,
        Some(p) => File::open(p)
            .with_context(|| format!("opening {}", p.display()))?
            .read_to_string(&mut text)
            .map(|_| ())?,
    }
    Ok(text)
}

fn parse_json<T: for<'de> Deserialize<'de>>(input: &InputArg) -> Result<T> {
    let text = read_input(input)?;
    serde_json::from_str(&text).context("parsing input JSON")
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let k = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if k == 0 || d == 0 {
        bail!("{what} is empty");
    }
    if rows.iter().any(|r| r.len() != d) {
        bail!("{what} rows have unequal lengths");
    }
    Ok(DMatrix::from_fn(k, d, |i, j| rows[i][j]))
}

fn run(args: &RunArgs) -> Result<()> {
    let record: InstanceRecord = parse_json(&args.input)?;
    let instance = BanditInstance::from_record(&record)?;
    let mut spec = AlgorithmSpec::new(args.algo);
    let explicit = args.t1.is_some() || args.lambda_init.is_some() || args.lambda_thres.is_some();
    if args.algo.is_lasso() {
        if args.cv && (args.lambda_init.is_some() || args.lambda_thres.is_some()) {
            bail!("--cv cannot be combined with explicit penalties");
        }
        spec.t1 = args.t1;
        spec.lambda_init = args.lambda_init;
        spec.lambda_thres = args.lambda_thres;
        spec.mode = if args.cv {
            HyperMode::Cv
        } else if explicit {
            HyperMode::Explicit
        } else {
            HyperMode::Analytical
        };
    } else if explicit || args.cv {
        log::warn!("{} ignores --T1, --lambda-* and --cv", args.algo.as_str());
    }
    let noise = trial_rng(args.seed, StreamKind::Noise, 0);
    let mut algo = trial_rng(args.seed, StreamKind::Algorithm, 0);
    let outcome = run_algorithm(&spec, &instance, args.budget, noise, &mut algo)?;
    emit(&outcome)
}

/// A bare `K x d` array or an object with an `arms` field.
#[derive(Deserialize)]
#[serde(untagged)]
enum ArmInput {
    Rows(Vec<Vec<f64>>),
    Wrapped { arms: Vec<Vec<f64>> },
}

#[derive(Serialize)]
struct DesignOutput {
    weights: Vec<f64>,
    objective: f64,
    certificate_gap: f64,
    converged: bool,
    degenerate: bool,
}

fn design(args: &DesignArgs) -> Result<()> {
    let rows = match parse_json::<ArmInput>(&args.input)? {
        ArmInput::Rows(r) | ArmInput::Wrapped { arms: r } => r,
    };
    let arms = matrix_from_rows(&rows, "arm matrix")?;
    let alloc = match args.kind {
        DesignKind::E => e_optimal_design(&arms, args.tol.unwrap_or(DEFAULT_TOL), args.max_iters),
        DesignKind::G => g_optimal_design(&arms, args.tol.unwrap_or(DEFAULT_TOL), args.max_iters),
        DesignKind::Xy => xy_allocation(&arms, args.tol.unwrap_or(XY_TOL), args.max_iters),
    }?;
    emit(&DesignOutput {
        weights: alloc.weights.iter().copied().collect(),
        objective: alloc.objective,
        certificate_gap: alloc.certificate_gap,
        converged: alloc.converged,
        degenerate: alloc.degenerate,
    })
}

#[derive(Deserialize)]
struct EstimateInput {
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    lambda_init: f64,
    lambda_thres: f64,
}

#[derive(Serialize)]
struct EstimateOutput {
    theta: Vec<f64>,
    support: Vec<usize>,
}

fn estimate(input: &InputArg) -> Result<()> {
    let req: EstimateInput = parse_json(input)?;
    let x = matrix_from_rows(&req.x, "X")?;
    let problem = RegressionProblem::new(x, DVector::from_vec(req.y))?;
    let fit = lasso(&problem, req.lambda_init, LASSO_TOL, LASSO_MAX_ITERS)?;
    if !fit.converged {
        log::warn!("Lasso stopped with KKT residual {:e}", fit.kkt_residual);
    }
    let est = threshold(&fit.coefficients, req.lambda_thres)?;
    emit(&EstimateOutput {
        theta: est.coefficients.iter().copied().collect(),
        support: est.support,
    })
}

fn bounds(input: &InputArg) -> Result<()> {
    let inputs: TheoryInputs = parse_json(input)?;
    emit(&evaluate_bounds(&inputs)?)
}

fn bench(args: &BenchArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text).context("parsing benchmark config")?;
    config.fixed_instance |= args.fixed_instance;
    let report = run_benchmark(&config)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    report.write_csv(&mut out)?;
    out.flush()?;
    let failures = report.failures();
    if failures > 0 {
        log::error!("{failures} runs ended in a solver failure");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a).map(|_| ExitCode::SUCCESS),
        Command::Design(a) => design(a).map(|_| ExitCode::SUCCESS),
        Command::Estimate(a) => estimate(a).map(|_| ExitCode::SUCCESS),
        Command::Bounds(a) => bounds(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
