//! Maximization of the smallest eigenvalue of the design Gram matrix.
//!
//! Solved as the semidefinite program `max t s.t. M(nu) - t I >= 0` with a
//! log-determinant barrier and Newton centering. At a centered point,
//! `P = S^{-1} / tr S^{-1}` with `S = M(nu) - t I` is a density matrix, so
//! `max_k a(k)^T P a(k)` upper-bounds the optimum and certifies the gap.

use nalgebra::{DMatrix, DVector};

use super::barrier::{center, BarrierObjective, Local};
use super::{arm_rank, min_eigenvalue, weighted_gram, Allocation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct EBarrier<'a, T: Scalar> {
    arms: &'a DMatrix<T>,
}

impl<T: Scalar> EBarrier<'_, T> {
    fn slack(&self, z: &DVector<T>) -> Option<nalgebra::Cholesky<T, nalgebra::Dyn>> {
        let k = self.arms.nrows();
        let nu = z.rows(0, k).into_owned();
        let t = z[k];
        let mut s = weighted_gram(&nu, self.arms);
        for i in 0..s.nrows() {
            s[(i, i)] -= t;
        }
        s.cholesky()
    }

    /// Dual upper bound `max_k a(k)^T S^{-1} a(k) / tr S^{-1}`.
    fn upper_bound(&self, z: &DVector<T>) -> Option<T> {
        let chol = self.slack(z)?;
        let inv = chol.inverse();
        let b = self.arms * &inv;
        let q = b.component_mul(self.arms).column_sum();
        Some(q.max() / inv.trace())
    }
}

fn log_barrier_nu<T: Scalar>(z: &DVector<T>, k: usize) -> T {
    z.rows(0, k).iter().fold(T::zero(), |acc, v| acc - v.ln())
}

impl<T: Scalar> BarrierObjective<T> for EBarrier<'_, T> {
    fn value(&self, z: &DVector<T>, tau: T) -> Option<T> {
        let k = self.arms.nrows();
        let chol = self.slack(z)?;
        let log_det = chol.l_dirty().diagonal().iter().fold(T::zero(), |acc, v| acc + v.ln()) * T::lit(2.0);
        Some(-tau * z[k] - log_det + log_barrier_nu(z, k))
    }

    fn local(&self, z: &DVector<T>, tau: T) -> Option<Local<T>> {
        let k = self.arms.nrows();
        let value = self.value(z, tau)?;
        let inv = self.slack(z)?.inverse();
        let b = self.arms * &inv; // row k: a(k)^T S^{-1}
        let q = b.component_mul(self.arms).column_sum();
        let g = &b * self.arms.transpose();
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        for i in 0..k {
            let nu = z[i];
            grad[i] = -q[i] - T::one() / nu;
            for j in 0..k {
                hess[(i, j)] = g[(i, j)] * g[(i, j)];
            }
            hess[(i, i)] += T::one() / (nu * nu);
            let c = -b.row(i).norm_squared();
            hess[(i, k)] = c;
            hess[(k, i)] = c;
        }
        grad[k] = -tau + inv.trace();
        hess[(k, k)] = inv.norm_squared();
        Some(Local { value, grad, hess })
    }
}

/// Solves `max_nu sigma_min(sum_k nu_k a(k) a(k)^T)` over the simplex.
///
/// `arms` holds one arm per row. The returned allocation's `objective` is the
/// smallest eigenvalue achieved and `certificate_gap` is the relative distance
/// to the dual upper bound; `tol` bounds that relative gap. When the arms span
/// fewer than `d` dimensions every design has objective zero; uniform weights
/// are returned with the `degenerate` flag set.
pub fn e_optimal_design<T: Scalar>(arms: &DMatrix<T>, tol: T, max_iters: usize) -> Result<Allocation<T>> {
    let (k, d) = arms.shape();
    if k == 0 || d == 0 {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "empty arm set".into(),
        });
    }
    if arms.iter().all(|v| *v == T::zero()) {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "all arms are zero".into(),
        });
    }
    if tol <= T::zero() {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: "must be positive".into(),
        });
    }
    let uniform = DVector::from_element(k, T::one() / T::from_usize_lossy(k));
    if arm_rank(arms) < d {
        let mut alloc = Allocation::new(uniform, T::zero());
        alloc.degenerate = true;
        return Ok(alloc);
    }

    let barrier = EBarrier { arms };
    let start = min_eigenvalue(&weighted_gram(&uniform, arms));
    let mut z = DVector::zeros(k + 1);
    z.rows_mut(0, k).copy_from(&uniform);
    z[k] = start * T::lit(0.5);
    let constraints = T::from_usize_lossy(d + k);
    let mut tau = constraints / start;

    let mut best_nu = uniform.clone();
    let mut best_lower = start;
    let mut best_upper = T::max_value().unwrap();
    let mut iters = 0;
    let mut converged = false;
    for _ in 0..64 {
        let pass = center(&barrier, &mut z, tau, max_iters.saturating_sub(iters).max(1));
        iters += pass.steps;
        let nu = z.rows(0, k).into_owned();
        let lower = min_eigenvalue(&weighted_gram(&nu, arms));
        if lower > best_lower {
            best_lower = lower;
            best_nu = nu;
        }
        if let Some(ub) = barrier.upper_bound(&z) {
            best_upper = best_upper.min(ub);
        }
        if best_upper - best_lower <= tol * best_upper {
            converged = true;
            break;
        }
        if !pass.healthy || iters >= max_iters || tau * T::noise_floor() * best_upper > constraints {
            break;
        }
        tau *= T::lit(10.0);
    }

    let mut alloc = Allocation::new(best_nu, best_lower);
    alloc.certificate_gap = ((best_upper - best_lower) / best_upper).max(T::zero());
    alloc.iterations = iters;
    alloc.converged = converged;
    if !converged {
        log::warn!(
            "E-optimal design stopped after {iters} Newton steps with relative gap {:e}",
            alloc.certificate_gap.as_f64()
        );
    }
    Ok(alloc)
}
