//! Lasso by alternating-direction splitting with an exact support polish.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use super::RegressionProblem;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Penalty parameter of the splitting method.
const RHO: f64 = 1.0;
const ABS_TOL: f64 = 1e-8;
const REL_TOL: f64 = 1e-6;
const POLISH_EVERY: usize = 10;

/// Result of a Lasso solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LassoFit<T: Scalar> {
    pub coefficients: DVector<T>,
    /// Largest violation of the subgradient optimality conditions.
    pub kkt_residual: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Reusable factorization for solving one problem at many penalty levels.
///
/// Minimizes `(1/n)||y - X theta||^2 + lambda ||theta||_1`. With `A = (2/n) X^T X`
/// and `b = (2/n) X^T y` the smooth part is `theta^T A theta / 2 - b^T theta`
/// plus a constant.
#[derive(Debug, Clone)]
pub struct LassoSolver<T: Scalar> {
    a: DMatrix<T>,
    b: DVector<T>,
    yy: T,
    factor: Cholesky<T, Dyn>,
}

fn soft<T: Scalar>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

impl<T: Scalar> LassoSolver<T> {
    pub fn new(problem: &RegressionProblem<T>) -> Self {
        let n = T::from_usize_lossy(problem.n());
        let x = problem.design();
        let scale = T::lit(2.0) / n;
        let a = x.tr_mul(x) * scale;
        let b = x.tr_mul(problem.responses()) * scale;
        let yy = problem.responses().norm_squared() / n;
        let d = a.nrows();
        let shifted = &a + DMatrix::identity(d, d) * T::lit(RHO);
        let factor = Cholesky::new(shifted).expect("A + rho I is positive definite");
        Self { a, b, yy, factor }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Value of the Lasso objective at `theta`.
    pub fn objective(&self, theta: &DVector<T>, lambda: T) -> T {
        let quad = theta.dot(&(&self.a * theta)) * T::lit(0.5);
        self.yy + quad - self.b.dot(theta) + lambda * theta.lp_norm(1)
    }

    /// Largest violation of `0 in A theta - b + lambda * d|theta|`.
    pub fn kkt_residual(&self, theta: &DVector<T>, lambda: T) -> T {
        let grad = &self.a * theta - &self.b;
        grad.iter()
            .zip(theta.iter())
            .map(|(g, t)| {
                if *t > T::zero() {
                    (*g + lambda).abs()
                } else if *t < T::zero() {
                    (*g - lambda).abs()
                } else {
                    (g.abs() - lambda).max(T::zero())
                }
            })
            .fold(T::zero(), |acc, v| acc.max(v))
    }

    /// Solves the reduced stationarity system on the support of `z` with its
    /// signs fixed; returns the candidate only if the signs survive.
    fn polish(&self, z: &DVector<T>, lambda: T) -> Option<DVector<T>> {
        let support: Vec<usize> = (0..z.len()).filter(|&j| z[j] != T::zero()).collect();
        let d = z.len();
        if support.is_empty() {
            return Some(DVector::zeros(d));
        }
        let m = support.len();
        let a_ss = DMatrix::from_fn(m, m, |i, j| self.a[(support[i], support[j])]);
        let rhs = DVector::from_fn(m, |i, _| self.b[support[i]] - lambda * z[support[i]].signum());
        let sol = Cholesky::new(a_ss)?.solve(&rhs);
        let mut theta = DVector::zeros(d);
        for (i, &j) in support.iter().enumerate() {
            if sol[i].signum() != z[j].signum() || sol[i] == T::zero() {
                return None;
            }
            theta[j] = sol[i];
        }
        Some(theta)
    }

    /// Solves at penalty `lambda`, optionally warm-started from `warm`.
    pub fn solve(&self, lambda: T, tol: T, max_iters: usize, warm: Option<&DVector<T>>) -> Result<LassoFit<T>> {
        if !(lambda > T::zero()) {
            return Err(invalid("lambda_init", "penalty must be positive"));
        }
        if !(tol > T::zero()) {
            return Err(invalid("tol", "tolerance must be positive"));
        }
        let d = self.dim();
        let rho = T::lit(RHO);
        let mut z = match warm {
            Some(w) if w.len() == d => w.clone(),
            _ => DVector::zeros(d),
        };
        let mut u = DVector::<T>::zeros(d);
        let sqrt_d = T::from_usize_lossy(d).sqrt();
        let mut best = z.clone();
        let mut best_res = self.kkt_residual(&z, lambda);
        let mut iters = 0;
        while best_res > tol && iters < max_iters {
            iters += 1;
            let theta = self.factor.solve(&(&self.b + (&z - &u) * rho));
            let z_prev = std::mem::replace(&mut z, (&theta + &u).map(|v| soft(v, lambda / rho)));
            u += &theta - &z;

            let res = self.kkt_residual(&z, lambda);
            if res < best_res {
                best_res = res;
                best.copy_from(&z);
            }
            if iters % POLISH_EVERY == 0 {
                if let Some(p) = self.polish(&z, lambda) {
                    let res = self.kkt_residual(&p, lambda);
                    if res < best_res {
                        best_res = res;
                        best = p;
                    }
                }
            }
            let primal = (&theta - &z).norm();
            let dual = (&z - &z_prev).norm() * rho;
            let eps_pri = sqrt_d * T::lit(ABS_TOL) + T::lit(REL_TOL) * theta.norm().max(z.norm());
            let eps_dual = sqrt_d * T::lit(ABS_TOL) + T::lit(REL_TOL) * (&u * rho).norm();
            if primal <= eps_pri && dual <= eps_dual && best_res <= tol {
                break;
            }
        }
        let converged = best_res <= tol;
        if !converged {
            log::warn!("lasso stopped after {iters} iterations, KKT residual {:e}", best_res.as_f64());
        }
        Ok(LassoFit {
            coefficients: best,
            kkt_residual: best_res,
            iterations: iters,
            converged,
        })
    }
}

/// Minimizes `(1/n)||y - X theta||^2 + lambda_init ||theta||_1`.
///
/// The returned fit carries a `converged` flag instead of failing when
/// `max_iters` runs out.
pub fn lasso<T: Scalar>(problem: &RegressionProblem<T>, lambda_init: T, tol: T, max_iters: usize) -> Result<LassoFit<T>> {
    LassoSolver::new(problem).solve(lambda_init, tol, max_iters, None)
}
