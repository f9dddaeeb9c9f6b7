//! Instance families, the Monte-Carlo benchmark runner and CSV reports.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{gse, lasso_od, lasso_tuned, lasso_xy, od_linbai, popart_od, AlgorithmOutcome, AllocationRule};
use crate::analysis::{analytical_plan, cv_tune, default_grid, CvConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{hardness, summarize, BanditInstance, Simulator};
use crate::sparse::{lasso, threshold, RegressionProblem, LASSO_MAX_ITERS, LASSO_TOL};

/// Environment variable holding the worker count of the benchmark pool.
pub const WORKERS_ENV: &str = "SPARSE_BAI_WORKERS";

/// Synthetic instance families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    /// Arms uniform on the sphere of radius `sqrt(d/s)`, `theta* = (1,..,1,0,..)`.
    A,
    /// Family-A arms with off-support coordinates `delta * R_j`, `R_j` Rademacher.
    B,
    /// Gaussian `N(0, 1/s)` arm entries, `theta*_i = 1/sqrt(s)` on the first `s` coordinates.
    C,
    /// Entries `R cos(pi/4 + Z)` with `Z ~ N(0, 0.01)`, `theta*_i = 1/sqrt(s)`.
    D,
    /// Cosine arms on the first two coordinates, sphere noise elsewhere.
    E,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Family::A),
            "B" => Ok(Family::B),
            "C" => Ok(Family::C),
            "D" => Ok(Family::D),
            "E" => Ok(Family::E),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }
}

impl TryFrom<String> for Family {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.to_string()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
            Family::D => "D",
            Family::E => "E",
        };
        f.write_str(c)
    }
}

fn default_sigma() -> f64 {
    1.0
}

/// Family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub s: usize,
    /// Off-support magnitude of family B.
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
}

impl GeneratorSpec {
    pub fn new(family: Family, d: usize, k: usize, s: usize) -> Self {
        Self {
            family,
            d,
            k,
            s,
            delta: 0.0,
            noise_sigma: 1.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    /// Family name, with `delta` appended for family B.
    pub fn label(&self) -> String {
        match self.family {
            Family::B => format!("B[delta={}]", self.delta),
            f => f.to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid("K", "need at least two arms"));
        }
        if self.s == 0 || self.s > self.d {
            return Err(invalid("s", format!("must lie in 1..={}", self.d)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta", "must be nonnegative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", "must be nonnegative"));
        }
        if self.family == Family::E && (self.s != 2 || self.k < 3) {
            return Err(invalid("family", "family E needs s = 2 and K >= 3"));
        }
        Ok(())
    }
}

fn sphere_point<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn sphere_arms<R: Rng + ?Sized>(k: usize, d: usize, radius: f64, rng: &mut R) -> DMatrix<f64> {
    let mut arms = DMatrix::zeros(k, d);
    for i in 0..k {
        for (j, v) in sphere_point(d, radius, rng).into_iter().enumerate() {
            arms[(i, j)] = v;
        }
    }
    arms
}

fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draws one instance of the family.
pub fn generate_instance<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<BanditInstance<f64>> {
    spec.validate()?;
    let (k, d, s) = (spec.k, spec.d, spec.s);
    let sf = s as f64;
    let leading = |value: f64| DVector::from_fn(d, |j, _| if j < s { value } else { 0.0 });
    let (arms, theta, exact) = match spec.family {
        Family::A => (sphere_arms(k, d, (d as f64 / sf).sqrt(), rng), leading(1.0), true),
        Family::B => {
            let arms = sphere_arms(k, d, (d as f64 / sf).sqrt(), rng);
            let mut theta = leading(1.0);
            for j in s..d {
                theta[j] = spec.delta * rademacher(rng);
            }
            (arms, theta, spec.delta == 0.0)
        }
        Family::C => {
            let normal = Normal::new(0.0, (1.0 / sf).sqrt()).map_err(|e| invalid("s", e.to_string()))?;
            let arms = DMatrix::from_fn(k, d, |_, _| normal.sample(rng));
            (arms, leading(1.0 / sf.sqrt()), true)
        }
        Family::D => {
            let z = Normal::new(0.0, 0.1).expect("valid normal");
            let arms = DMatrix::from_fn(k, d, |_, _| {
                let r = rademacher(rng);
                r * (std::f64::consts::FRAC_PI_4 + z.sample(rng)).cos()
            });
            (arms, leading(1.0 / sf.sqrt()), true)
        }
        Family::E => {
            let phi = Normal::new(0.0, 0.3).expect("valid normal");
            let mut arms = DMatrix::zeros(k, d);
            let angle = |i: usize, rng: &mut R| {
                if i == 0 {
                    std::f64::consts::FRAC_PI_4
                } else if i == k - 1 {
                    5.0 * std::f64::consts::FRAC_PI_4
                } else {
                    std::f64::consts::FRAC_PI_2 + phi.sample(rng)
                }
            };
            for i in 0..k {
                let a = angle(i, rng);
                arms[(i, 0)] = a.cos();
                arms[(i, 1)] = a.sin();
                if d > s {
                    let rest = sphere_point(d - s, ((d - s) as f64 / sf).sqrt(), rng);
                    for (j, v) in rest.into_iter().enumerate() {
                        arms[(i, s + j)] = v;
                    }
                }
            }
            (arms, leading(std::f64::consts::FRAC_1_SQRT_2), true)
        }
    };
    if exact {
        BanditInstance::new(arms, theta, spec.noise_sigma, s)
    } else {
        BanditInstance::new_approximately_sparse(arms, theta, spec.noise_sigma, s)
    }
}

/// Algorithm names accepted by the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoName {
    #[serde(alias = "od-linbai")]
    Odlinbai,
    Gse,
    LassoOd,
    LassoXy,
    PopartOd,
}

impl AlgoName {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgoName::Odlinbai => "odlinbai",
            AlgoName::Gse => "gse",
            AlgoName::LassoOd => "lasso-od",
            AlgoName::LassoXy => "lasso-xy",
            AlgoName::PopartOd => "popart-od",
        }
    }

    pub fn is_lasso(self) -> bool {
        matches!(self, AlgoName::LassoOd | AlgoName::LassoXy)
    }
}

impl FromStr for AlgoName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odlinbai" | "od-linbai" => Ok(AlgoName::Odlinbai),
            "gse" => Ok(AlgoName::Gse),
            "lasso-od" => Ok(AlgoName::LassoOd),
            "lasso-xy" => Ok(AlgoName::LassoXy),
            "popart-od" => Ok(AlgoName::PopartOd),
            _ => Err(invalid("algo", format!("unknown algorithm `{s}`"))),
        }
    }
}

/// How the two-phase Lasso algorithms obtain `T1`, `lambda_init` and `lambda_thres`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    /// Penalties from the compatibility constant of the E-optimal design.
    #[default]
    Analytical,
    /// Penalties by cross-validation on the phase-one samples.
    Cv,
    /// Phase-one budget and both penalties supplied by the caller.
    Explicit,
}

/// An algorithm and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub name: AlgoName,
    #[serde(default)]
    pub mode: HyperMode,
    /// Analytical mode: split the budget by balancing the two error exponents
    /// with the instance's true hardness. When false the split uses `c0`.
    #[serde(default = "default_true")]
    pub oracle_split: bool,
    #[serde(default, rename = "T1")]
    pub t1: Option<usize>,
    /// `T1 / T` when `T1` is not given; defaults to 1/5 in CV mode.
    #[serde(default)]
    pub t1_fraction: Option<f64>,
    #[serde(default)]
    pub lambda_init: Option<f64>,
    #[serde(default)]
    pub lambda_thres: Option<f64>,
    #[serde(default)]
    pub cv: CvConfig,
}

fn default_true() -> bool {
    true
}

impl AlgorithmSpec {
    pub fn new(name: AlgoName) -> Self {
        Self {
            name,
            mode: HyperMode::default(),
            oracle_split: true,
            t1: None,
            t1_fraction: None,
            lambda_init: None,
            lambda_thres: None,
            cv: CvConfig::default(),
        }
    }

    pub fn with_mode(mut self, mode: HyperMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn explicit(name: AlgoName, t1: usize, lambda_init: f64, lambda_thres: f64) -> Self {
        Self {
            mode: HyperMode::Explicit,
            t1: Some(t1),
            lambda_init: Some(lambda_init),
            lambda_thres: Some(lambda_thres),
            ..Self::new(name)
        }
    }

    /// Column label, e.g. `lasso-od-analytical`.
    pub fn label(&self) -> String {
        if !self.name.is_lasso() {
            return self.name.as_str().to_string();
        }
        let mode = match self.mode {
            HyperMode::Analytical if !self.oracle_split => "analytical-c0",
            HyperMode::Analytical => "analytical",
            HyperMode::Cv => "cv",
            HyperMode::Explicit => "explicit",
        };
        format!("{}-{mode}", self.name.as_str())
    }

    fn phase_one_budget(&self, budget: usize, default_fraction: Option<f64>) -> Result<usize> {
        let t1 = match (self.t1, self.t1_fraction.or(default_fraction)) {
            (Some(t1), _) => t1,
            (None, Some(f)) if f > 0.0 && f < 1.0 => (budget as f64 * f).round() as usize,
            (None, Some(_)) => return Err(invalid("t1_fraction", "must lie in (0, 1)")),
            (None, None) => return Err(invalid("T1", "phase-one budget required")),
        };
        if t1 == 0 || t1 >= budget {
            return Err(invalid("T1", format!("must lie in 1..{budget}")));
        }
        Ok(t1)
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_lasso() && self.mode == HyperMode::Explicit {
            if self.t1.is_none() && self.t1_fraction.is_none() {
                return Err(invalid("T1", "explicit mode needs T1 or t1_fraction"));
            }
            if self.lambda_init.is_none() || self.lambda_thres.is_none() {
                return Err(invalid("lambda", "explicit mode needs lambda_init and lambda_thres"));
            }
        }
        Ok(())
    }
}

/// Runs one algorithm on one instance with budget `budget`.
///
/// Rewards are drawn from `noise_rng`; algorithm-internal randomness (PopArt
/// arm draws, CV fold shuffles) from `algo_rng`.
pub fn run_algorithm<R1: Rng, R2: Rng>(
    spec: &AlgorithmSpec,
    instance: &BanditInstance<f64>,
    budget: usize,
    noise_rng: R1,
    algo_rng: &mut R2,
) -> Result<AlgorithmOutcome> {
    spec.validate()?;
    let arms = instance.arms();
    let mut env = Simulator::new(instance, noise_rng);
    let (s, theta_min) = (instance.sparsity(), instance.theta_min());
    match spec.name {
        AlgoName::Odlinbai => od_linbai(arms, budget, AllocationRule::GOptimal, &mut env),
        AlgoName::Gse => gse(arms, budget, &mut env),
        AlgoName::PopartOd => popart_od(arms, budget, theta_min, s, &mut env, algo_rng),
        AlgoName::LassoOd | AlgoName::LassoXy => {
            let rule = if spec.name == AlgoName::LassoOd {
                AllocationRule::GOptimal
            } else {
                AllocationRule::Xy
            };
            let run = |t1: usize, li: f64, lt: f64, env: &mut Simulator<'_, f64, R1>| match rule {
                AllocationRule::GOptimal => lasso_od(arms, t1, budget - t1, li, lt, env),
                AllocationRule::Xy => lasso_xy(arms, t1, budget - t1, li, lt, env),
            };
            match spec.mode {
                HyperMode::Explicit => {
                    let t1 = spec.phase_one_budget(budget, None)?;
                    let (li, lt) = (spec.lambda_init.unwrap_or_default(), spec.lambda_thres.unwrap_or_default());
                    run(t1, li, lt, &mut env)
                }
                HyperMode::Analytical => {
                    let h = if spec.oracle_split {
                        let summary = summarize(instance)?;
                        let m = (s + s * s).clamp(2, instance.num_arms());
                        Some(hardness(&summary, m)?)
                    } else {
                        None
                    };
                    let plan = analytical_plan(arms, theta_min, s, budget, h)?;
                    if plan.t1 == 0 || plan.t2 == 0 {
                        return Err(Error::InfeasibleBudget {
                            budget,
                            reason: format!("analytical split gives T1 = {}, T2 = {}", plan.t1, plan.t2),
                        });
                    }
                    run(plan.t1, plan.hyper.lambda_init, plan.hyper.lambda_thres, &mut env)
                }
                HyperMode::Cv => {
                    let t1 = spec.phase_one_budget(budget, Some(0.2))?;
                    let grid = default_grid::<f64>();
                    let tune = |p: &RegressionProblem<f64>| {
                        cv_tune(p, &grid, &grid, s, &spec.cv, algo_rng).map(|c| (c.lambda_init, c.lambda_thres))
                    };
                    lasso_tuned(arms, t1, budget - t1, rule, tune, &mut env)
                }
            }
        }
    }
}

fn default_trials() -> usize {
    1000
}

/// One benchmark: a generator, the algorithms to compare and the budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub algorithms: Vec<AlgorithmSpec>,
    /// Budgets `T`, strictly increasing.
    pub budgets: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Reuse one arm set for every trial instead of drawing a fresh one.
    #[serde(default)]
    pub fixed_instance: bool,
    /// Fill the `seconds` column with wall time; off by default so reports
    /// are byte-reproducible.
    #[serde(default)]
    pub record_time: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.trials == 0 {
            return Err(invalid("trials", "need at least one trial"));
        }
        if self.algorithms.is_empty() {
            return Err(invalid("algorithms", "no algorithm given"));
        }
        if self.budgets.is_empty() || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("budgets", "must be nonempty and strictly increasing"));
        }
        self.algorithms.iter().try_for_each(AlgorithmSpec::validate)
    }
}

/// Independent random streams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Instance,
    Noise,
    Algorithm,
}

/// RNG for `(base_seed, kind)` on stream `trial`. Different trials use
/// different ChaCha streams of the same key, so their sequences never overlap.
pub fn trial_rng(base_seed: u64, kind: StreamKind, trial: u64) -> ChaCha8Rng {
    let tag = match kind {
        StreamKind::Instance => 0x9e37_79b9_7f4a_7c15u64,
        StreamKind::Noise => 0xbf58_476d_1ce4_e5b9,
        StreamKind::Algorithm => 0x94d0_49bb_1331_11eb,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ tag);
    rng.set_stream(trial);
    rng
}

/// Result of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub error: bool,
    /// The algorithm (or instance generation) returned an error.
    pub failed: bool,
    pub support_size: Option<usize>,
}

/// Tallies of a range of trials; merging is associative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub trials: usize,
    pub errors: usize,
    pub failures: usize,
    pub support_total: usize,
    pub support_count: usize,
}

impl Tally {
    pub fn record(mut self, o: &TrialOutcome) -> Self {
        self.trials += 1;
        self.errors += usize::from(o.error);
        self.failures += usize::from(o.failed);
        if let Some(sz) = o.support_size {
            self.support_total += sz;
            self.support_count += 1;
        }
        self
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            trials: self.trials + other.trials,
            errors: self.errors + other.errors,
            failures: self.failures + other.failures,
            support_total: self.support_total + other.support_total,
            support_count: self.support_count + other.support_count,
        }
    }

    pub fn p_hat(&self) -> f64 {
        self.errors as f64 / self.trials.max(1) as f64
    }

    /// `sqrt(p (1-p) / n)`.
    pub fn stderr(&self) -> f64 {
        let p = self.p_hat();
        (p * (1.0 - p) / self.trials.max(1) as f64).sqrt()
    }

    pub fn mean_support(&self) -> Option<f64> {
        (self.support_count > 0).then(|| self.support_total as f64 / self.support_count as f64)
    }
}

fn instance_for(config: &ExperimentConfig, trial: usize) -> Result<BanditInstance<f64>> {
    let stream = if config.fixed_instance { 0 } else { trial as u64 };
    generate_instance(&config.generator, &mut trial_rng(config.base_seed, StreamKind::Instance, stream))
}

/// Runs trial `trial` of algorithm `algo` at budget `budget`. The instance
/// and noise streams depend only on the trial index, so algorithms and
/// budgets are compared on common random numbers.
pub fn run_trial(config: &ExperimentConfig, algo: &AlgorithmSpec, budget: usize, trial: usize) -> TrialOutcome {
    let attempt = || -> Result<(AlgorithmOutcome, usize)> {
        let instance = instance_for(config, trial)?;
        let best = summarize(&instance)?.best_arm;
        let noise = trial_rng(config.base_seed, StreamKind::Noise, trial as u64);
        let mut algo_rng = trial_rng(config.base_seed, StreamKind::Algorithm, trial as u64);
        Ok((run_algorithm(algo, &instance, budget, noise, &mut algo_rng)?, best))
    };
    match attempt() {
        Ok((out, best)) => TrialOutcome {
            error: out.chosen_arm != best,
            failed: false,
            support_size: out.support_found.as_ref().map(Vec::len),
        },
        Err(e) => {
            log::warn!("trial {trial} of {} at T = {budget} failed: {e}", algo.label());
            TrialOutcome {
                error: true,
                failed: true,
                support_size: None,
            }
        }
    }
}

/// Tally over a range of trial indices.
pub fn run_trials(config: &ExperimentConfig, algo: &AlgorithmSpec, budget: usize, trials: Range<usize>) -> Tally {
    let outcomes: Vec<TrialOutcome> = trials.into_par_iter().map(|t| run_trial(config, algo, budget, t)).collect();
    outcomes.iter().fold(Tally::default(), Tally::record)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub family: String,
    pub algo: String,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub trials: usize,
    pub errors: usize,
    pub p_hat: f64,
    pub stderr: f64,
    pub mean_support: Option<f64>,
    pub seconds: f64,
    /// Trials whose run returned an error (also counted in `errors`).
    #[serde(skip)]
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Numerical(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::Numerical(format!("csv: {e}")))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

fn in_pool<F: FnOnce() -> R + Send, R: Send>(f: F) -> R {
    match workers_from_env().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// Runs every `(algorithm, budget)` cell for `config.trials` trials.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let g = &config.generator;
    let rows = in_pool(|| {
        let mut rows = Vec::new();
        for algo in &config.algorithms {
            for &budget in &config.budgets {
                let start = Instant::now();
                let tally = run_trials(config, algo, budget, 0..config.trials);
                let seconds = if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
                log::info!(
                    "{} T={budget}: {}/{} errors ({} failures)",
                    algo.label(),
                    tally.errors,
                    tally.trials,
                    tally.failures
                );
                rows.push(BenchmarkRow {
                    family: g.label(),
                    algo: algo.label(),
                    d: g.d,
                    k: g.k,
                    s: g.s,
                    t: budget,
                    trials: tally.trials,
                    errors: tally.errors,
                    p_hat: tally.p_hat(),
                    stderr: tally.stderr(),
                    mean_support: tally.mean_support(),
                    seconds,
                    failures: tally.failures,
                });
            }
        }
        rows
    });
    Ok(BenchmarkReport { rows })
}

/// Thresholded-Lasso support recovery on Gaussian designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRecoveryConfig {
    pub d: usize,
    pub s: usize,
    /// Sample sizes `T`.
    pub budgets: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Defaults to `0.2 / s`.
    #[serde(default)]
    pub lambda_init: Option<f64>,
    /// Defaults to `0.4 / s`.
    #[serde(default)]
    pub lambda_thres: Option<f64>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
}

impl SupportRecoveryConfig {
    pub fn new(d: usize, s: usize, budgets: Vec<usize>, trials: usize) -> Self {
        Self {
            d,
            s,
            budgets,
            trials,
            base_seed: 0,
            lambda_init: None,
            lambda_thres: None,
            noise_sigma: 1.0,
        }
    }

    pub fn penalties(&self) -> (f64, f64) {
        let s = self.s as f64;
        (self.lambda_init.unwrap_or(0.2 / s), self.lambda_thres.unwrap_or(0.4 / s))
    }
}

/// Miss frequency `P(S^ not containing S(theta*))` and mean `|S^|` at one `T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportRecoveryRow {
    pub d: usize,
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub trials: usize,
    pub misses: usize,
    pub p_miss: f64,
    pub stderr: f64,
    pub mean_support: f64,
}

fn recovery_trial(config: &SupportRecoveryConfig, budget: usize, trial: usize) -> Result<(bool, usize)> {
    let (d, s) = (config.d, config.s);
    let mut rng = trial_rng(config.base_seed ^ budget as u64, StreamKind::Instance, trial as u64);
    let normal = Normal::new(0.0, (1.0 / s as f64).sqrt()).map_err(|e| invalid("s", e.to_string()))?;
    let x = DMatrix::from_fn(budget, d, |_, _| normal.sample(&mut rng));
    let theta = DVector::from_fn(d, |j, _| if j < s { 1.0 / (s as f64).sqrt() } else { 0.0 });
    let noise = DVector::from_fn(budget, |_, _| config.noise_sigma * rng.sample::<f64, _>(StandardNormal));
    let y = &x * &theta + noise;
    let (li, lt) = config.penalties();
    let fit = lasso(&RegressionProblem::new(x, y)?, li, LASSO_TOL, LASSO_MAX_ITERS)?;
    let est = threshold(&fit.coefficients, lt)?;
    let missed = (0..s).any(|j| !est.support.contains(&j));
    Ok((missed, est.support.len()))
}

/// Draws `X` with i.i.d. `N(0, 1/s)` entries and `y = X theta* + noise`,
/// runs thresholded Lasso and records support misses.
pub fn support_recovery_experiment(config: &SupportRecoveryConfig) -> Result<Vec<SupportRecoveryRow>> {
    if config.s == 0 || config.s > config.d {
        return Err(invalid("s", format!("must lie in 1..={}", config.d)));
    }
    if config.trials == 0 || config.budgets.is_empty() {
        return Err(invalid("trials", "need trials and budgets"));
    }
    in_pool(|| {
        config
            .budgets
            .iter()
            .map(|&budget| {
                let results = (0..config.trials)
                    .into_par_iter()
                    .map(|t| recovery_trial(config, budget, t))
                    .collect::<Result<Vec<_>>>()?;
                let misses = results.iter().filter(|r| r.0).count();
                let n = results.len() as f64;
                let p = misses as f64 / n;
                Ok(SupportRecoveryRow {
                    d: config.d,
                    s: config.s,
                    t: budget,
                    trials: results.len(),
                    misses,
                    p_miss: p,
                    stderr: (p * (1.0 - p) / n).sqrt(),
                    mean_support: results.iter().map(|r| r.1 as f64).sum::<f64>() / n,
                })
            })
            .collect()
    })
}

/// Pooled two-proportion z statistic for `p1 - p2`.
pub fn two_proportion_z(errors1: usize, n1: usize, errors2: usize, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let (p1, p2) = (errors1 as f64 / n1f, errors2 as f64 / n2f);
    let pooled = (errors1 + errors2) as f64 / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        0.0
    } else {
        (p1 - p2) / se
    }
}

/// Largest error count consistent with probability `p` over `n` trials at
/// the one-sided 95% level (normal approximation, at least one).
pub fn binomial_upper_95(p: f64, n: usize) -> f64 {
    let nf = n as f64;
    (nf * p + 1.645 * (nf * p * (1.0 - p)).sqrt()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::summarize;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn family_a_arms_on_sphere() {
        let spec = GeneratorSpec::new(Family::A, 10, 50, 2);
        let inst = generate_instance(&spec, &mut rng(1)).unwrap();
        for k in 0..50 {
            assert!((inst.arm(k).norm_squared() - 5.0).abs() < 1e-9);
        }
        let means = inst.means();
        for k in 0..50 {
            assert!((means[k] - inst.arms()[(k, 0)] - inst.arms()[(k, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn family_b_zero_delta_is_family_a() {
        let a = generate_instance(&GeneratorSpec::new(Family::A, 10, 20, 2), &mut rng(4)).unwrap();
        let b = generate_instance(&GeneratorSpec::new(Family::B, 10, 20, 2), &mut rng(4)).unwrap();
        assert_eq!(a.theta_star(), b.theta_star());
        assert_eq!(a.arms(), b.arms());
        let b = generate_instance(&GeneratorSpec::new(Family::B, 10, 20, 2).with_delta(0.025), &mut rng(4)).unwrap();
        assert_eq!(b.theta_min(), 1.0);
        assert!(b.theta_star().iter().skip(2).all(|v| (v.abs() - 0.025).abs() < 1e-15));
    }

    #[test]
    fn family_c_and_d_parameters() {
        let c = generate_instance(&GeneratorSpec::new(Family::C, 10, 50, 4), &mut rng(2)).unwrap();
        assert_eq!(c.support(), vec![0, 1, 2, 3]);
        assert!((c.theta_min() - 0.5).abs() < 1e-15);
        let d = generate_instance(&GeneratorSpec::new(Family::D, 10, 50, 2), &mut rng(2)).unwrap();
        assert!(d.arms().iter().all(|v| v.abs() <= 1.0));
        let mean_abs = d.arms().iter().map(|v| v.abs()).sum::<f64>() / 500.0;
        assert!((mean_abs - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02);
    }

    #[test]
    fn family_e_layout() {
        let spec = GeneratorSpec::new(Family::E, 10, 50, 2);
        let inst = generate_instance(&spec, &mut rng(3)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((inst.arms()[(0, 0)] - h).abs() < 1e-15 && (inst.arms()[(0, 1)] - h).abs() < 1e-15);
        assert!((inst.arms()[(49, 0)] + h).abs() < 1e-12);
        for k in 0..50 {
            let tail: f64 = (2..10).map(|j| inst.arms()[(k, j)].powi(2)).sum();
            assert!((tail - 4.0).abs() < 1e-9);
        }
        assert_eq!(summarize(&inst).unwrap().best_arm, 0);
        assert!(generate_instance(&GeneratorSpec::new(Family::E, 10, 50, 3), &mut rng(3)).is_err());
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!("Z".parse::<Family>(), Err(Error::UnknownFamily(_))));
        let r: std::result::Result<GeneratorSpec, _> =
            serde_json::from_str(r#"{"family":"Q","d":4,"K":3,"s":1}"#);
        assert!(r.is_err());
    }

    fn noiseless_config(name: AlgoName) -> ExperimentConfig {
        let mut g = GeneratorSpec::new(Family::A, 6, 12, 2);
        g.noise_sigma = 0.0;
        ExperimentConfig {
            generator: g,
            algorithms: vec![AlgorithmSpec::new(name)],
            budgets: vec![600],
            trials: 8,
            base_seed: 7,
            fixed_instance: false,
            record_time: false,
        }
    }

    #[test]
    fn noiseless_benchmark_has_no_errors() {
        for name in [AlgoName::Odlinbai, AlgoName::Gse, AlgoName::LassoOd, AlgoName::LassoXy, AlgoName::PopartOd] {
            let r = run_benchmark(&noiseless_config(name)).unwrap();
            assert_eq!(r.rows[0].errors, 0, "{name:?}");
            assert_eq!(r.failures(), 0);
        }
    }

    #[test]
    fn reports_are_reproducible_and_split_associatively() {
        let mut cfg = noiseless_config(AlgoName::LassoOd);
        cfg.generator.noise_sigma = 3.0;
        cfg.trials = 12;
        let a = run_benchmark(&cfg).unwrap().to_csv_string().unwrap();
        let b = run_benchmark(&cfg).unwrap().to_csv_string().unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("family,algo,d,K,s,T,trials,errors,p_hat,stderr,mean_support,seconds\n"));
        let algo = &cfg.algorithms[0];
        let whole = run_trials(&cfg, algo, 600, 0..12);
        let halves = run_trials(&cfg, algo, 600, 0..6).merge(run_trials(&cfg, algo, 600, 6..12));
        assert_eq!(whole, halves);
    }

    #[test]
    fn trial_streams_are_disjoint() {
        let firsts: Vec<[u64; 4]> = (0..200)
            .map(|t| {
                let mut r = trial_rng(1, StreamKind::Noise, t);
                [r.random(), r.random(), r.random(), r.random()]
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        for f in &firsts {
            for v in f {
                assert!(seen.insert(*v));
            }
        }
        let mut a = trial_rng(1, StreamKind::Noise, 0);
        let mut b = trial_rng(1, StreamKind::Instance, 0);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn fixed_instance_shares_arms() {
        let mut cfg = noiseless_config(AlgoName::Gse);
        cfg.fixed_instance = true;
        assert_eq!(instance_for(&cfg, 0).unwrap(), instance_for(&cfg, 5).unwrap());
        cfg.fixed_instance = false;
        assert_ne!(instance_for(&cfg, 0).unwrap(), instance_for(&cfg, 5).unwrap());
    }

    #[test]
    fn stderr_matches_binomial() {
        let t = Tally {
            trials: 400,
            errors: 40,
            ..Tally::default()
        };
        assert!((t.stderr() - (0.1f64 * 0.9 / 400.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = noiseless_config(AlgoName::Gse);
        cfg.budgets = vec![800, 400];
        assert!(run_benchmark(&cfg).is_err());
        cfg.budgets = vec![400];
        cfg.trials = 0;
        assert!(run_benchmark(&cfg).is_err());
        let mut cfg = noiseless_config(AlgoName::LassoOd);
        cfg.algorithms[0].mode = HyperMode::Explicit;
        assert!(run_benchmark(&cfg).is_err());
    }

    #[test]
    fn failures_are_counted() {
        let mut cfg = noiseless_config(AlgoName::Odlinbai);
        cfg.budgets = vec![4];
        let r = run_benchmark(&cfg).unwrap();
        assert_eq!(r.rows[0].errors, cfg.trials);
        assert_eq!(r.failures(), cfg.trials);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"generator":{"family":"A","d":10,"K":50,"s":2},
                "algorithms":[{"name":"lasso-od"},{"name":"odlinbai"}],
                "budgets":[800]}"#,
        )
        .unwrap();
        assert_eq!(cfg.trials, 1000);
        assert_eq!(cfg.algorithms[0].mode, HyperMode::Analytical);
        assert_eq!(cfg.algorithms[0].label(), "lasso-od-analytical");
        assert_eq!(cfg.generator.noise_sigma, 1.0);
    }

    #[test]
    fn z_test_signs() {
        assert!(two_proportion_z(10, 1000, 50, 1000) < -1.645);
        assert_eq!(two_proportion_z(0, 10, 0, 10), 0.0);
    }

    #[test]
    fn support_recovery_small() {
        let cfg = SupportRecoveryConfig::new(10, 2, vec![400], 50);
        let rows = support_recovery_experiment(&cfg).unwrap();
        assert_eq!(rows[0].misses, 0);
        assert!(rows[0].mean_support >= 2.0);
    }
}
