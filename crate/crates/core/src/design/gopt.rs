//! G-optimal design by Frank-Wolfe (Fedorov-Wynn) with away steps.
//!
//! Minimizing `max_i ||a(i)||^2_{M^{-1}}` is equivalent to maximizing
//! `log det M(pi)`, and the optimum equals the dimension `d`. Both the
//! toward and away steps use the closed-form exact line search for
//! `log det`.

use nalgebra::{DMatrix, DVector};

use super::{arm_rank, weighted_gram, Allocation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Greedily picks `d` linearly independent arms (largest residual norm first).
pub(crate) fn spanning_subset<T: Scalar>(arms: &DMatrix<T>) -> Vec<usize> {
    let (k, d) = arms.shape();
    let mut basis: Vec<DVector<T>> = Vec::with_capacity(d);
    let mut chosen = Vec::with_capacity(d);
    let mut residuals: Vec<DVector<T>> = arms.row_iter().map(|r| r.transpose()).collect();
    while chosen.len() < d {
        let (best, norm) = (0..k)
            .filter(|i| !chosen.contains(i))
            .map(|i| (i, residuals[i].norm()))
            .fold((usize::MAX, T::zero()), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best == usize::MAX || norm <= T::zero() {
            break;
        }
        let q = &residuals[best] / norm;
        for r in residuals.iter_mut() {
            let c = r.dot(&q);
            r.axpy(-c, &q, T::one());
        }
        basis.push(q);
        chosen.push(best);
    }
    chosen
}

fn variances<T: Scalar>(arms: &DMatrix<T>, nu: &DVector<T>) -> Result<DVector<T>> {
    let m = weighted_gram(nu, arms);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("design Gram matrix lost positive definiteness".into()))?;
    let solved = chol.solve(&arms.transpose());
    Ok(DVector::from_iterator(
        arms.nrows(),
        arms.row_iter()
            .zip(solved.column_iter())
            .map(|(a, s)| a.transpose().dot(&s)),
    ))
}

/// Solves `min_pi max_i ||a(i)||^2_{M(pi)^{-1}}` for the rows of `arms`.
///
/// The arms must span `R^d`. Stops once the Kiefer-Wolfowitz certificate
/// `max_i ||a(i)||^2 <= d (1 + tol)` holds; `certificate_gap` reports
/// `objective / d - 1`.
pub fn g_optimal_design<T: Scalar>(arms: &DMatrix<T>, tol: T, max_iters: usize) -> Result<Allocation<T>> {
    let (k, d) = arms.shape();
    if k == 0 || d == 0 {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "empty arm set".into(),
        });
    }
    let rank = arm_rank(arms);
    if rank < d {
        return Err(Error::RankDeficient { rank, dim: d });
    }
    let dim = T::from_usize_lossy(d);
    let mut nu = DVector::zeros(k);
    let start = spanning_subset(arms);
    for &i in &start {
        nu[i] = T::one() / T::from_usize_lossy(start.len());
    }

    let mut iters = 0;
    let mut converged = false;
    let mut g = variances(arms, &nu)?;
    loop {
        let (top, g_max) = g.argmax();
        if g_max <= dim * (T::one() + tol) {
            converged = true;
            break;
        }
        if iters >= max_iters {
            break;
        }
        iters += 1;
        // away vertex: active arm with the smallest variance
        let (away, g_min) = nu
            .iter()
            .zip(g.iter())
            .enumerate()
            .filter(|(_, (w, _))| **w > T::zero())
            .map(|(i, (_, gi))| (i, *gi))
            .fold((usize::MAX, T::max_value().unwrap_or(dim)), |acc, cur| {
                if cur.1 < acc.1 { cur } else { acc }
            });
        let toward_gap = g_max - dim;
        let away_gap = dim - g_min;
        if away != usize::MAX && away_gap > toward_gap && nu[away] < T::one() {
            let cap = nu[away] / (T::one() - nu[away]);
            let gamma = if g_min > T::one() {
                ((dim - g_min) / (dim * (g_min - T::one()))).min(cap)
            } else {
                cap
            };
            nu *= T::one() + gamma;
            nu[away] -= gamma;
            if gamma >= cap || nu[away] < T::noise_floor() {
                nu[away] = T::zero();
            }
        } else {
            let gamma = ((g_max / dim - T::one()) / (g_max - T::one()))
                .max(T::zero())
                .min(T::one());
            nu *= T::one() - gamma;
            nu[top] += gamma;
        }
        let total = nu.sum();
        nu /= total;
        g = variances(arms, &nu)?;
    }

    let objective = g.max();
    let mut alloc = Allocation::new(nu, objective);
    alloc.certificate_gap = objective / dim - T::one();
    alloc.iterations = iters;
    alloc.converged = converged;
    if !converged {
        log::warn!(
            "G-optimal design stopped after {iters} iterations, certificate gap {:e}",
            alloc.certificate_gap.as_f64()
        );
    }
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::max_prediction_variance;
    use nalgebra::dmatrix;

    #[test]
    fn standard_basis_is_uniform() {
        for d in 1..6 {
            let arms = DMatrix::<f64>::identity(d, d);
            let a = g_optimal_design(&arms, 1e-9, 1000).unwrap();
            assert!((a.objective - d as f64).abs() < 1e-9);
            for w in a.weights.iter() {
                assert!((w - 1.0 / d as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn basis_matches_brute_force_grid() {
        let arms = dmatrix![1.0, 0.0; 0.0, 1.0];
        let mut best = f64::INFINITY;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let v = (1.0 / p).max(1.0 / (1.0 - p));
            best = best.min(v);
        }
        let a = g_optimal_design(&arms, 1e-9, 1000).unwrap();
        assert!((a.objective - best).abs() < 1e-9);
    }

    #[test]
    fn single_arm() {
        let a = g_optimal_design(&dmatrix![3.0f64], 1e-9, 10).unwrap();
        assert_eq!(a.weights[0], 1.0);
        assert!((a.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_arm_certificate() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let arms = dmatrix![1.0, 0.0; 0.0, 1.0; r, r];
        let tol = 1e-6;
        let a = g_optimal_design(&arms, tol, 100_000).unwrap();
        let m = weighted_gram(&a.weights, &arms);
        let v = max_prediction_variance(&m, &arms).unwrap();
        assert!(v <= 2.0 * (1.0 + tol));
        assert!(a.converged);
    }

    #[test]
    fn rank_deficient_rejected() {
        let arms = dmatrix![1.0, 1.0; 2.0, 2.0];
        assert!(matches!(
            g_optimal_design(&arms, 1e-6, 10),
            Err(Error::RankDeficient { rank: 1, dim: 2 })
        ));
    }

    #[test]
    fn works_in_f32() {
        let arms = DMatrix::<f32>::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let a = g_optimal_design(&arms, 1e-3, 10_000).unwrap();
        assert!(a.objective <= 2.0 * 1.001);
    }
}
