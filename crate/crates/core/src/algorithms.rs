//! Fixed-budget best-arm identification: OD-LinBAI, GSE and the two-phase
//! sparse variants Lasso-OD, Lasso-XY and PopArt-OD.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{g_optimal_design, round_allocation, xy_allocation, Allocation, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::error::{invalid, Error, Result};
use crate::model::Environment;
use crate::scalar::Scalar;
use crate::sparse::{popart_estimate, thresholded_lasso_phase_tuned, RegressionProblem};

/// Relative tolerance of the XY-allocation solver inside elimination rounds.
pub const XY_TOL: f64 = 1e-3;
pub const XY_MAX_ITERS: usize = 20_000;

/// Design used to spread each round's budget over the active arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    GOptimal,
    Xy,
}

/// How the active set shrinks from round to round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    /// `ceil(log2 d)` rounds keeping `ceil(d / 2^r)` arms.
    Dimension(usize),
    /// `ceil(log2 K)` rounds halving the active set.
    Halving(usize),
}

impl Schedule {
    fn rounds(self) -> usize {
        let n = match self {
            Schedule::Dimension(d) => d,
            Schedule::Halving(k) => k,
        };
        ceil_log2(n).max(1)
    }

    fn keep(self, round: usize, active: usize) -> usize {
        let n = match self {
            Schedule::Dimension(d) => d,
            Schedule::Halving(k) => k,
        };
        n.div_ceil(1usize << round.min(63)).clamp(1, active)
    }
}

pub(crate) fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// One elimination round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub budget: usize,
    /// Dimension of the active arms after reduction.
    pub dim: usize,
    /// Active arms at the start of the round (original indices).
    pub active: Vec<usize>,
    /// Pulls of each active arm, aligned with `active`.
    pub pulls: Vec<usize>,
    pub survivors: Vec<usize>,
}

/// Result of one identification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmOutcome {
    pub chosen_arm: usize,
    pub phase1_budget: usize,
    pub phase2_budget: usize,
    /// Estimated support for the two-phase algorithms.
    pub support_found: Option<Vec<usize>>,
    /// Set when the estimated support was empty and phase 2 used all coordinates.
    pub support_fallback: bool,
    pub round_trace: Vec<RoundTrace>,
    pub total_pulls: usize,
}

/// Per-round budgets: `floor(T/R)` for all rounds but the last, which takes
/// the remainder.
pub fn round_budgets(budget: usize, rounds: usize) -> Vec<usize> {
    let base = budget / rounds;
    let mut out = vec![base; rounds];
    out[rounds - 1] = budget - base * (rounds - 1);
    out
}

/// Orthonormal coordinates of the rows of `x` in their own span.
fn reduce_dimension<T: Scalar>(x: &DMatrix<T>) -> DMatrix<T> {
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let cut = smax * T::noise_floor() * T::from_usize_lossy(x.nrows().max(x.ncols()));
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cut)
        .collect();
    if keep.len() == x.ncols() {
        return x.clone();
    }
    let basis = v_t.select_rows(&keep);
    x * basis.transpose()
}

fn allocate<T: Scalar>(x: &DMatrix<T>, rule: AllocationRule) -> Result<Allocation<T>> {
    if x.nrows() == 1 {
        return Ok(single_arm());
    }
    match rule {
        AllocationRule::GOptimal => g_optimal_design(x, T::lit(DEFAULT_TOL), DEFAULT_MAX_ITERS),
        AllocationRule::Xy => match xy_allocation(x, T::lit(XY_TOL), XY_MAX_ITERS) {
            Ok(a) => Ok(a),
            Err(Error::InvalidParameter { .. }) => g_optimal_design(x, T::lit(DEFAULT_TOL), DEFAULT_MAX_ITERS),
            Err(e) => Err(e),
        },
    }
}

fn single_arm<T: Scalar>() -> Allocation<T> {
    Allocation::new(DVector::from_element(1, T::one()), T::one())
}

/// Round-based elimination on estimation vectors `est_arms` (one row per
/// arm, possibly projected), pulling original arm `k` from `env`.
fn eliminate<T: Scalar, E: Environment<T>>(
    est_arms: &DMatrix<T>,
    budget: usize,
    schedule: Schedule,
    rule: AllocationRule,
    env: &mut E,
) -> Result<(usize, Vec<RoundTrace>)> {
    let k = est_arms.nrows();
    if k == 0 {
        return Err(invalid("arms", "empty arm set"));
    }
    if k == 1 {
        return Ok((0, Vec::new()));
    }
    let rounds = schedule.rounds();
    let d = est_arms.ncols();
    if budget / rounds < d {
        return Err(Error::InfeasibleBudget {
            budget,
            reason: format!("{rounds} rounds of floor({budget}/{rounds}) pulls cannot cover dimension {d}"),
        });
    }
    let budgets = round_budgets(budget, rounds);
    let mut active: Vec<usize> = (0..k).collect();
    let mut coords = est_arms.clone();
    let mut trace = Vec::with_capacity(rounds);

    for (r, &round_budget) in budgets.iter().enumerate() {
        if active.len() == 1 {
            break;
        }
        coords = reduce_dimension(&coords);
        let alloc = allocate(&coords, rule)?;
        let counts = round_allocation(&alloc.weights, round_budget)?;

        let dim = coords.ncols();
        let mut v = DMatrix::<T>::zeros(dim, dim);
        let mut b = DVector::<T>::zeros(dim);
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x = coords.row(i).transpose();
            let rewards = env.pull_many(active[i], c)?;
            let total = rewards.into_iter().fold(T::zero(), |acc, y| acc + y);
            v += &x * x.transpose() * T::from_usize_lossy(c);
            b += &x * total;
        }
        let theta = v
            .pseudo_inverse(T::noise_floor())
            .map_err(|e| Error::Numerical(e.to_string()))?
            * b;
        let estimates = &coords * theta;

        let keep = if r + 1 == rounds { 1 } else { schedule.keep(r + 1, active.len()) };
        let mut order: Vec<usize> = (0..active.len()).collect();
        // stable sort keeps the lowest index first among equal estimates
        order.sort_by(|&i, &j| estimates[j].partial_cmp(&estimates[i]).unwrap_or(std::cmp::Ordering::Equal));
        let mut kept: Vec<usize> = order[..keep].to_vec();
        kept.sort_unstable();

        trace.push(RoundTrace {
            round: r + 1,
            budget: round_budget,
            dim,
            active: active.clone(),
            pulls: counts,
            survivors: kept.iter().map(|&i| active[i]).collect(),
        });
        coords = coords.select_rows(&kept);
        active = kept.iter().map(|&i| active[i]).collect();
    }
    Ok((active[0], trace))
}

fn pulls_in(trace: &[RoundTrace]) -> usize {
    trace.iter().map(|r| r.pulls.iter().sum::<usize>()).sum()
}

fn check_arms<T: Scalar>(arms: &DMatrix<T>, env_arms: usize) -> Result<()> {
    if arms.nrows() == 0 || arms.ncols() == 0 {
        return Err(invalid("arms", "empty arm set"));
    }
    if arms.nrows() != env_arms {
        return Err(Error::DimensionMismatch {
            expected: env_arms,
            got: arms.nrows(),
        });
    }
    Ok(())
}

/// OD-LinBAI: `ceil(log2 d)` rounds, keeping `ceil(d/2^r)` arms after round `r`.
pub fn od_linbai<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    budget: usize,
    rule: AllocationRule,
    env: &mut E,
) -> Result<AlgorithmOutcome> {
    check_arms(arms, env.num_arms())?;
    let (chosen_arm, round_trace) = eliminate(arms, budget, Schedule::Dimension(arms.ncols()), rule, env)?;
    Ok(AlgorithmOutcome {
        chosen_arm,
        phase1_budget: 0,
        phase2_budget: budget,
        support_found: None,
        support_fallback: false,
        total_pulls: pulls_in(&round_trace),
        round_trace,
    })
}

/// GSE: `ceil(log2 K)` rounds, halving the active set each round.
pub fn gse<T: Scalar, E: Environment<T>>(arms: &DMatrix<T>, budget: usize, env: &mut E) -> Result<AlgorithmOutcome> {
    check_arms(arms, env.num_arms())?;
    let (chosen_arm, round_trace) = eliminate(
        arms,
        budget,
        Schedule::Halving(arms.nrows()),
        AllocationRule::GOptimal,
        env,
    )?;
    Ok(AlgorithmOutcome {
        chosen_arm,
        phase1_budget: 0,
        phase2_budget: budget,
        support_found: None,
        support_fallback: false,
        total_pulls: pulls_in(&round_trace),
        round_trace,
    })
}

/// Phase 2 on the arms restricted to `support` (all coordinates when empty).
fn restricted_phase<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    support: &[usize],
    budget: usize,
    rule: AllocationRule,
    env: &mut E,
) -> Result<(usize, Vec<RoundTrace>, bool)> {
    let fallback = support.is_empty();
    let projected = if fallback { arms.clone() } else { arms.select_columns(support) };
    let dim = projected.ncols();
    let (chosen, trace) = eliminate(&projected, budget, Schedule::Dimension(dim), rule, env)?;
    Ok((chosen, trace, fallback))
}

fn lasso_two_phase<T, E, F>(
    arms: &DMatrix<T>,
    t1: usize,
    t2: usize,
    tune: F,
    rule: AllocationRule,
    env: &mut E,
) -> Result<AlgorithmOutcome>
where
    T: Scalar,
    E: Environment<T>,
    F: FnOnce(&RegressionProblem<T>) -> Result<(T, T)>,
{
    check_arms(arms, env.num_arms())?;
    if arms.nrows() == 1 {
        return Ok(AlgorithmOutcome {
            chosen_arm: 0,
            phase1_budget: t1,
            phase2_budget: t2,
            support_found: None,
            support_fallback: false,
            round_trace: Vec::new(),
            total_pulls: 0,
        });
    }
    let phase_one = thresholded_lasso_phase_tuned(arms, t1, tune, env)?;
    let support = phase_one.estimate.support;
    let (chosen_arm, round_trace, support_fallback) = restricted_phase(arms, &support, t2, rule, env)?;
    Ok(AlgorithmOutcome {
        chosen_arm,
        phase1_budget: t1,
        phase2_budget: t2,
        support_found: Some(support),
        support_fallback,
        total_pulls: t1 + pulls_in(&round_trace),
        round_trace,
    })
}

/// Lasso-OD: thresholded Lasso on `T1` pulls, then OD-LinBAI on the estimated
/// support with `T2` pulls.
pub fn lasso_od<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    t1: usize,
    t2: usize,
    lambda_init: T,
    lambda_thres: T,
    env: &mut E,
) -> Result<AlgorithmOutcome> {
    lasso_two_phase(arms, t1, t2, |_| Ok((lambda_init, lambda_thres)), AllocationRule::GOptimal, env)
}

/// Lasso-XY: as [`lasso_od`] with XY-allocations in phase 2.
pub fn lasso_xy<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    t1: usize,
    t2: usize,
    lambda_init: T,
    lambda_thres: T,
    env: &mut E,
) -> Result<AlgorithmOutcome> {
    lasso_two_phase(arms, t1, t2, |_| Ok((lambda_init, lambda_thres)), AllocationRule::Xy, env)
}

/// Two-phase algorithm whose penalties are chosen from the phase-one samples
/// by `tune`, e.g. by cross-validation.
pub fn lasso_tuned<T, E, F>(
    arms: &DMatrix<T>,
    t1: usize,
    t2: usize,
    rule: AllocationRule,
    tune: F,
    env: &mut E,
) -> Result<AlgorithmOutcome>
where
    T: Scalar,
    E: Environment<T>,
    F: FnOnce(&RegressionProblem<T>) -> Result<(T, T)>,
{
    lasso_two_phase(arms, t1, t2, tune, rule, env)
}

/// PopArt-OD: PopArt support estimation, then OD-LinBAI on that support.
///
/// `rng` drives the i.i.d. arm draws of the PopArt phase.
pub fn popart_od<T: Scalar, E: Environment<T>, R: Rng + ?Sized>(
    arms: &DMatrix<T>,
    budget: usize,
    theta_min: T,
    s: usize,
    env: &mut E,
    rng: &mut R,
) -> Result<AlgorithmOutcome> {
    check_arms(arms, env.num_arms())?;
    if arms.nrows() == 1 {
        return Ok(AlgorithmOutcome {
            chosen_arm: 0,
            phase1_budget: 0,
            phase2_budget: budget,
            support_found: None,
            support_fallback: false,
            round_trace: Vec::new(),
            total_pulls: 0,
        });
    }
    let est = popart_estimate(arms, env, rng, budget, theta_min, s)?;
    let (t1, t2) = (est.config.t1, est.config.t2);
    let (chosen_arm, round_trace, support_fallback) =
        restricted_phase(arms, &est.support, t2, AllocationRule::GOptimal, env)?;
    Ok(AlgorithmOutcome {
        chosen_arm,
        phase1_budget: t1,
        phase2_budget: t2,
        support_found: Some(est.support),
        support_fallback,
        total_pulls: t1 + pulls_in(&round_trace),
        round_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{summarize, BanditInstance, Simulator};
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_instance(seed: u64, k: usize, d: usize, s: usize, sigma: f64) -> BanditInstance<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let arms = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
            let mut theta = DVector::zeros(d);
            for j in 0..s {
                theta[j] = 1.0;
            }
            let inst = BanditInstance::new(arms, theta, sigma, s).unwrap();
            if summarize(&inst).map(|sm| sm.gaps[0] > 1e-3).unwrap_or(false) {
                return inst;
            }
        }
    }

    fn best(inst: &BanditInstance<f64>) -> usize {
        summarize(inst).unwrap().best_arm
    }

    #[test]
    fn log2_ceiling() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
    }

    #[test]
    fn budgets_put_remainder_last() {
        assert_eq!(round_budgets(10, 3), vec![3, 3, 4]);
        assert_eq!(round_budgets(9, 1), vec![9]);
    }

    #[test]
    fn single_arm_returns_immediately() {
        let inst = BanditInstance::new(dmatrix![1.0, 0.0], DVector::from_vec(vec![1.0, 0.0]), 1.0, 1).unwrap();
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = od_linbai(inst.arms(), 10, AllocationRule::GOptimal, &mut env).unwrap();
        assert_eq!(out.chosen_arm, 0);
        assert!(out.round_trace.is_empty());
        assert_eq!(env.pulls(), 0);
    }

    #[test]
    fn basis_noiseless() {
        let inst = BanditInstance::new(dmatrix![1.0, 0.0; 0.0, 1.0], DVector::from_vec(vec![1.0, 0.0]), 0.0, 1).unwrap();
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = od_linbai(inst.arms(), 10, AllocationRule::GOptimal, &mut env).unwrap();
        assert_eq!(out.chosen_arm, 0);
        assert_eq!(out.total_pulls, 10);
    }

    #[test]
    fn infeasible_budget() {
        let inst = random_instance(1, 8, 4, 2, 1.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            od_linbai(inst.arms(), 7, AllocationRule::GOptimal, &mut env),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn od_linbai_schedule_and_budget() {
        let inst = random_instance(2, 12, 8, 2, 1.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = od_linbai(inst.arms(), 100, AllocationRule::GOptimal, &mut env).unwrap();
        let sizes: Vec<usize> = out.round_trace.iter().map(|r| r.active.len()).collect();
        assert_eq!(sizes, vec![12, 4, 2]);
        let budgets: Vec<usize> = out.round_trace.iter().map(|r| r.budget).collect();
        assert_eq!(budgets, vec![33, 33, 34]);
        for r in &out.round_trace {
            assert_eq!(r.pulls.iter().sum::<usize>(), r.budget);
        }
        assert_eq!(out.total_pulls, 100);
        assert_eq!(env.pulls(), 100);
    }

    #[test]
    fn gse_halves() {
        let inst = random_instance(3, 8, 3, 2, 1.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = gse(inst.arms(), 90, &mut env).unwrap();
        assert_eq!(out.round_trace.len(), 3);
        let sizes: Vec<usize> = out.round_trace.iter().map(|r| r.active.len()).collect();
        assert_eq!(sizes, vec![8, 4, 2]);
        assert_eq!(out.total_pulls, 90);
    }

    #[test]
    fn noiseless_runs_find_best_arm() {
        for seed in 0..20 {
            let inst = random_instance(100 + seed, 8, 4, 2, 0.0);
            let truth = best(&inst);
            let arms = inst.arms();
            let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(od_linbai(arms, 40, AllocationRule::GOptimal, &mut env).unwrap().chosen_arm, truth);
            assert_eq!(od_linbai(arms, 40, AllocationRule::Xy, &mut env).unwrap().chosen_arm, truth);
            assert_eq!(gse(arms, 40, &mut env).unwrap().chosen_arm, truth);
            assert_eq!(lasso_od(arms, 40, 40, 1e-3, 0.1, &mut env).unwrap().chosen_arm, truth);
            assert_eq!(lasso_xy(arms, 40, 40, 1e-3, 0.1, &mut env).unwrap().chosen_arm, truth);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            assert_eq!(popart_od(arms, 4000, 1.0, 2, &mut env, &mut rng).unwrap().chosen_arm, truth);
        }
    }

    #[test]
    fn empty_support_falls_back_to_full_dimension() {
        let inst = random_instance(7, 8, 4, 2, 0.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = lasso_od(inst.arms(), 40, 40, 1e-3, 1e6, &mut env).unwrap();
        assert!(out.support_fallback);
        assert_eq!(out.support_found, Some(vec![]));
        assert_eq!(out.chosen_arm, best(&inst));
        assert_eq!(out.total_pulls, 80);
    }

    #[test]
    fn lasso_od_reports_support() {
        let inst = random_instance(8, 30, 10, 2, 0.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(0));
        let out = lasso_od(inst.arms(), 160, 640, 1e-3, 0.1, &mut env).unwrap();
        let support = out.support_found.unwrap();
        assert!(support.contains(&0) && support.contains(&1));
        assert_eq!(out.phase1_budget + out.phase2_budget, 800);
        assert_eq!(out.chosen_arm, best(&inst));
    }
}
