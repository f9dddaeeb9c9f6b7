//! Continuous experimental designs over a finite arm set and their rounding
//! to integer pull counts.

mod barrier;
mod eopt;
mod gopt;
mod minimax;

pub use eopt::e_optimal_design;
pub use gopt::g_optimal_design;
pub use minimax::{diagonal_variance_design, minimax_variance_design, xy_allocation};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Relative certificate tolerance for the E-optimal design inside the
/// algorithms; far below the rounding error of any phase budget.
pub const E_OPT_TOL: f64 = 1e-4;
/// Default iteration cap for the design solvers.
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// A probability vector over arms together with the solver's diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation<T: Scalar> {
    pub weights: DVector<T>,
    /// Objective achieved by `weights` (criterion-specific).
    pub objective: T,
    /// Optimality certificate gap reported by the solver.
    pub certificate_gap: T,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the problem is degenerate (e.g. arms do not span).
    pub degenerate: bool,
    /// Integer pull counts after [`round_allocation`], when requested.
    pub counts: Option<Vec<usize>>,
}

impl<T: Scalar> Allocation<T> {
    pub(crate) fn new(weights: DVector<T>, objective: T) -> Self {
        Self {
            weights,
            objective,
            certificate_gap: T::zero(),
            iterations: 0,
            converged: true,
            degenerate: false,
            counts: None,
        }
    }

    /// Attaches integer counts summing to `budget`.
    pub fn rounded(mut self, budget: usize) -> Result<Self> {
        self.counts = Some(round_allocation(&self.weights, budget)?);
        Ok(self)
    }

    /// Empirical distribution of the rounded counts, when present.
    pub fn rounded_weights(&self) -> Option<DVector<T>> {
        let counts = self.counts.as_ref()?;
        let total: usize = counts.iter().sum();
        let total = T::from_usize_lossy(total.max(1));
        Some(DVector::from_iterator(
            counts.len(),
            counts.iter().map(|&c| T::from_usize_lossy(c) / total),
        ))
    }
}

/// Symmetric positive-semidefinite matrix `M(nu) = sum_k nu_k a(k) a(k)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T: Scalar>(DMatrix<T>);

impl<T: Scalar> GramMatrix<T> {
    /// Wraps a matrix after checking symmetry and positive semidefiniteness.
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let scale = matrix.amax().max(T::one());
        let sym_tol = T::lit(1e-10).max(T::noise_floor()) * scale;
        let n = matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > sym_tol {
                    return Err(Error::Numerical(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let min_eig = min_eigenvalue(&matrix);
        if min_eig < -sym_tol {
            return Err(Error::Numerical(format!(
                "matrix not positive semidefinite (min eigenvalue {:e})",
                min_eig.as_f64()
            )));
        }
        Ok(Self(matrix))
    }

    pub(crate) fn new_unchecked(matrix: DMatrix<T>) -> Self {
        Self(matrix)
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn min_eigenvalue(&self) -> T {
        min_eigenvalue(&self.0)
    }
}

pub(crate) fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return T::zero();
    }
    let sym = (m + m.transpose()) * T::lit(0.5);
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Checks that `weights` is a probability vector of length `k`.
pub fn validate_distribution<T: Scalar>(weights: &DVector<T>, k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
    }
    let sum = weights.sum();
    let tol = T::lit(1e-9).max(T::noise_floor() * T::from_usize_lossy(k.max(1)));
    if (sum - T::one()).abs() > tol {
        return Err(Error::InvalidDistribution(format!(
            "weights sum to {}",
            sum.as_f64()
        )));
    }
    Ok(())
}

/// `M = sum_k w_k a(k) a(k)^T` for the arms stored as the rows of `arms`.
pub fn gram<T: Scalar>(weights: &DVector<T>, arms: &DMatrix<T>) -> Result<GramMatrix<T>> {
    validate_distribution(weights, arms.nrows())?;
    Ok(GramMatrix::new_unchecked(weighted_gram(weights, arms)))
}

pub(crate) fn weighted_gram<T: Scalar>(weights: &DVector<T>, arms: &DMatrix<T>) -> DMatrix<T> {
    let mut scaled = arms.clone();
    for (mut row, w) in scaled.row_iter_mut().zip(weights.iter()) {
        row *= *w;
    }
    arms.transpose() * scaled
}

/// Numerical rank of the arm set (rows of `arms`).
pub fn arm_rank<T: Scalar>(arms: &DMatrix<T>) -> usize {
    if arms.nrows() == 0 || arms.ncols() == 0 {
        return 0;
    }
    let sv = arms.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= T::zero() {
        return 0;
    }
    let tol = max * T::from_usize_lossy(arms.nrows().max(arms.ncols())) * T::default_epsilon() * T::lit(10.0);
    sv.iter().filter(|v| **v > tol).count()
}

/// Converts a distribution into integer counts summing to `budget` with the
/// efficient-apportionment rule: start from `ceil((T - K/2) w_i)`, then add a
/// pull to the arm minimizing `T_i / w_i` or remove one from the arm
/// maximizing `(T_i - 1) / w_i` until the total is exact. Ties go to the
/// lowest index. Zero-weight arms never receive pulls.
pub fn round_allocation<T: Scalar>(weights: &DVector<T>, budget: usize) -> Result<Vec<usize>> {
    validate_distribution(weights, weights.len())?;
    if budget == 0 {
        return Err(Error::InvalidParameter {
            name: "budget",
            reason: "must be positive".into(),
        });
    }
    let k = weights.len();
    let w: Vec<f64> = weights.iter().map(|v| v.as_f64()).collect();
    let base = budget as f64 - k as f64 / 2.0;
    // Slack absorbs products like 3 * (1/3) landing one ulp above an integer.
    let slack = 1e-9 * (budget as f64).max(1.0);
    let mut counts: Vec<i64> = w
        .iter()
        .map(|&wi| if wi > 0.0 { (base * wi - slack).ceil() as i64 } else { 0 })
        .collect();
    let target = budget as i64;
    let mut total: i64 = counts.iter().sum();
    while total != target {
        if total < target {
            let j = argmin_by(&counts, &w, |c, wi| {
                if wi > 0.0 { c as f64 / wi } else { f64::INFINITY }
            });
            counts[j] += 1;
            total += 1;
        } else {
            let j = argmax_by(&counts, &w, |c, wi| {
                if wi > 0.0 {
                    (c - 1) as f64 / wi
                } else if c >= 1 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            });
            counts[j] -= 1;
            total -= 1;
        }
    }
    debug_assert!(counts.iter().all(|&c| c >= 0));
    Ok(counts.into_iter().map(|c| c.max(0) as usize).collect())
}

fn argmin_by(counts: &[i64], w: &[f64], ratio: impl Fn(i64, f64) -> f64) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, (&c, &wi)) in counts.iter().zip(w).enumerate() {
        let r = ratio(c, wi);
        if r < best_val {
            best_val = r;
            best = i;
        }
    }
    best
}

fn argmax_by(counts: &[i64], w: &[f64], ratio: impl Fn(i64, f64) -> f64) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (&c, &wi)) in counts.iter().zip(w).enumerate() {
        let r = ratio(c, wi);
        if r > best_val {
            best_val = r;
            best = i;
        }
    }
    best
}

/// `max_i a(i)^T M^{-1} a(i)` over the rows of `arms`, or `None` if `M` is singular.
pub fn max_prediction_variance<T: Scalar>(m: &DMatrix<T>, arms: &DMatrix<T>) -> Option<T> {
    let chol = m.clone().cholesky()?;
    let mut worst = T::zero();
    for row in arms.row_iter() {
        let a = row.transpose();
        let v = a.dot(&chol.solve(&a));
        if v > worst {
            worst = v;
        }
    }
    Some(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    #[test]
    fn gram_examples() {
        let arms = dmatrix![1.0, 0.0; 0.0, 1.0];
        let m = gram(&dvector![0.5, 0.5], &arms).unwrap();
        assert_eq!(m.matrix(), &dmatrix![0.5, 0.0; 0.0, 0.5]);

        let arms = dmatrix![1.0, 2.0; 0.0, 1.0];
        let m = gram(&dvector![1.0, 0.0], &arms).unwrap();
        assert_eq!(m.matrix(), &dmatrix![1.0, 2.0; 2.0, 4.0]);
        assert_eq!(arm_rank(m.matrix()), 1);
    }

    #[test]
    fn gram_matches_naive_sum() {
        let arms = dmatrix![0.3, -1.2, 0.7; 1.1, 0.4, -0.5; -0.9, 0.8, 0.2];
        let w = dvector![0.2, 0.5, 0.3];
        let m = gram(&w, &arms).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let naive: f64 = (0..3).map(|k| w[k] * arms[(k, i)] * arms[(k, j)]).sum();
                assert!((m.matrix()[(i, j)] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_rejects_bad_weights() {
        let arms = dmatrix![1.0, 0.0; 0.0, 1.0];
        assert!(gram(&dvector![0.5, 0.6], &arms).is_err());
        assert!(gram(&dvector![1.0], &arms).is_err());
        assert!(gram(&dvector![1.5, -0.5], &arms).is_err());
    }

    #[test]
    fn gram_matrix_validation() {
        assert!(GramMatrix::new(dmatrix![1.0, 0.5; 0.5, 1.0]).is_ok());
        assert!(GramMatrix::new(dmatrix![1.0, 0.5; 0.4, 1.0]).is_err());
        assert!(GramMatrix::new(dmatrix![1.0, 2.0; 2.0, 1.0]).is_err());
    }

    #[test]
    fn round_examples() {
        assert_eq!(round_allocation(&dvector![0.5, 0.5], 4).unwrap(), vec![2, 2]);
        assert_eq!(round_allocation(&dvector![0.5, 0.5], 5).unwrap(), vec![3, 2]);
        assert_eq!(round_allocation(&dvector![0.9, 0.1], 10).unwrap(), vec![9, 1]);
        assert_eq!(round_allocation(&dvector![0.0, 1.0, 0.0], 3).unwrap(), vec![0, 3, 0]);
    }

    #[test]
    fn round_rejects_invalid() {
        assert!(round_allocation(&dvector![0.5, 0.4], 4).is_err());
        assert!(round_allocation(&dvector![0.5, 0.5], 0).is_err());
    }

    #[test]
    fn round_in_f32() {
        let w = DVector::<f32>::from_element(3, 1.0 / 3.0);
        let c = round_allocation(&w, 7).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    fn distribution(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 1..max_k).prop_filter_map(
            "nonzero mass",
            |raw| {
                let s: f64 = raw.iter().sum();
                (s > 0.0).then(|| raw.iter().map(|v| v / s).collect())
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn round_sums_exactly(w in distribution(40), t in 1usize..500) {
            let w = DVector::from_vec(w);
            let counts = round_allocation(&w, t).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), t);
            for (c, wi) in counts.iter().zip(w.iter()) {
                if *wi == 0.0 {
                    prop_assert_eq!(*c, 0);
                }
            }
        }
    }
}
