//! Sparse parameter estimation: thresholded Lasso, the compatibility constant
//! and the PopArt estimator.

mod compat;
mod lasso;
mod popart;

pub use compat::{compatibility_constant, compatibility_constant_s, Compatibility, MAX_SUPPORT};
pub use lasso::{lasso, LassoFit, LassoSolver};
pub use popart::{catoni, catoni_psi, popart_estimate, PopArtConfig, PopArtEstimate};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{e_optimal_design, Allocation, DEFAULT_MAX_ITERS, E_OPT_TOL};
use crate::error::{invalid, Error, Result};
use crate::model::Environment;
use crate::scalar::Scalar;

/// Tolerance on the Lasso KKT residual used inside the algorithms.
pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_ITERS: usize = 100_000;

/// Linear regression data `y = X theta + noise`; rows of `X` are pulled arms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionProblem<T: Scalar> {
    design: DMatrix<T>,
    responses: DVector<T>,
}

impl<T: Scalar> RegressionProblem<T> {
    pub fn new(design: DMatrix<T>, responses: DVector<T>) -> Result<Self> {
        if design.nrows() != responses.len() {
            return Err(Error::DimensionMismatch {
                expected: design.nrows(),
                got: responses.len(),
            });
        }
        if design.nrows() == 0 {
            return Err(invalid("design", "no samples"));
        }
        Ok(Self { design, responses })
    }

    pub fn design(&self) -> &DMatrix<T> {
        &self.design
    }

    pub fn responses(&self) -> &DVector<T> {
        &self.responses
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    /// Sub-problem made of the given sample rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.design.select_rows(rows), self.responses.select_rows(rows))
    }
}

/// A thresholded coefficient vector and its support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseEstimate<T: Scalar> {
    pub coefficients: DVector<T>,
    pub support: Vec<usize>,
    /// Penalty of the initial Lasso fit, when one was run.
    pub lambda_init: Option<T>,
    pub lambda_thres: T,
}

/// Keeps coordinate `j` iff `|theta_j| >= lambda_thres`.
pub fn threshold<T: Scalar>(theta_init: &DVector<T>, lambda_thres: T) -> Result<SparseEstimate<T>> {
    if !(lambda_thres > T::zero()) {
        return Err(invalid("lambda_thres", "threshold must be positive"));
    }
    let coefficients = theta_init.map(|v| if v.abs() >= lambda_thres { v } else { T::zero() });
    let support = (0..coefficients.len()).filter(|&j| coefficients[j] != T::zero()).collect();
    Ok(SparseEstimate {
        coefficients,
        support,
        lambda_init: None,
        lambda_thres,
    })
}

/// Everything produced by the thresholded-Lasso phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseOne<T: Scalar> {
    pub estimate: SparseEstimate<T>,
    pub fit: LassoFit<T>,
    /// E-optimal design with counts rounded to the phase budget.
    pub allocation: Allocation<T>,
    pub problem: RegressionProblem<T>,
}

/// Pulls arms `counts[k]` times each, in index order, recording the samples.
pub fn collect_samples<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    counts: &[usize],
    env: &mut E,
) -> Result<RegressionProblem<T>> {
    let n: usize = counts.iter().sum();
    let d = arms.ncols();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            x.row_mut(row).copy_from(&arms.row(k));
            y[row] = env.pull(k)?;
            row += 1;
        }
    }
    RegressionProblem::new(x, y)
}

/// E-optimal design, rounded to `t1` pulls, followed by Lasso and thresholding.
pub fn thresholded_lasso_phase<T: Scalar, E: Environment<T>>(
    arms: &DMatrix<T>,
    t1: usize,
    lambda_init: T,
    lambda_thres: T,
    env: &mut E,
) -> Result<PhaseOne<T>> {
    thresholded_lasso_phase_tuned(arms, t1, |_| Ok((lambda_init, lambda_thres)), env)
}

/// As [`thresholded_lasso_phase`], choosing `(lambda_init, lambda_thres)`
/// from the collected samples with `tune`.
pub fn thresholded_lasso_phase_tuned<T, E, F>(arms: &DMatrix<T>, t1: usize, tune: F, env: &mut E) -> Result<PhaseOne<T>>
where
    T: Scalar,
    E: Environment<T>,
    F: FnOnce(&RegressionProblem<T>) -> Result<(T, T)>,
{
    if t1 == 0 {
        return Err(invalid("T1", "phase-one budget must be positive"));
    }
    let allocation = e_optimal_design(arms, T::lit(E_OPT_TOL), DEFAULT_MAX_ITERS)?.rounded(t1)?;
    let problem = collect_samples(arms, allocation.counts.as_deref().unwrap_or_default(), env)?;
    let (lambda_init, lambda_thres) = tune(&problem)?;
    let fit = lasso(&problem, lambda_init, T::lit(LASSO_TOL), LASSO_MAX_ITERS)?;
    let mut estimate = threshold(&fit.coefficients, lambda_thres)?;
    estimate.lambda_init = Some(lambda_init);
    Ok(PhaseOne {
        estimate,
        fit,
        allocation,
        problem,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BanditInstance, Simulator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        let e = threshold(&DVector::from_vec(vec![0.75, 0.1]), 0.2).unwrap();
        assert_eq!(e.support, vec![0]);
        assert_eq!(e.coefficients.as_slice(), &[0.75, 0.0]);
        let e = threshold(&DVector::from_vec(vec![0.2, 0.2]), 0.2).unwrap();
        assert_eq!(e.support, vec![0, 1]);
        let e = threshold(&DVector::<f64>::zeros(3), 0.2).unwrap();
        assert!(e.support.is_empty());
        assert!(threshold(&DVector::<f64>::zeros(3), 0.0).is_err());
    }

    #[test]
    fn threshold_is_idempotent() {
        let v = DVector::from_vec(vec![0.3, -0.05, 1.2, -0.4, 0.0]);
        let once = threshold(&v, 0.3).unwrap();
        let twice = threshold(&once.coefficients, 0.3).unwrap();
        assert_eq!(once, twice);
    }

    fn instance(sigma: f64) -> BanditInstance<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arms = DMatrix::from_fn(20, 6, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let theta = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        BanditInstance::new(arms, theta, sigma, 2).unwrap()
    }

    #[test]
    fn noiseless_phase_finds_support() {
        let inst = instance(0.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(1));
        let out = thresholded_lasso_phase(inst.arms(), 60, 1e-3, 0.1, &mut env).unwrap();
        assert!(out.estimate.support.contains(&0) && out.estimate.support.contains(&1));
        assert_eq!(out.problem.n(), 60);
        assert_eq!(env.pulls(), 60);
    }

    #[test]
    fn over_thresholding_empties_support() {
        let inst = instance(0.0);
        let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(1));
        let out = thresholded_lasso_phase(inst.arms(), 60, 1e-3, 100.0, &mut env).unwrap();
        assert!(out.estimate.support.is_empty());
    }

    #[test]
    fn phase_is_deterministic() {
        let inst = instance(1.0);
        let run = || {
            let mut env = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(9));
            thresholded_lasso_phase(inst.arms(), 80, 0.1, 0.2, &mut env).unwrap().estimate
        };
        assert_eq!(run(), run());
    }
}
