//! Newton centering for log-barrier problems over `(nu, t)` with `nu` on the
//! simplex. The caller supplies value, gradient and Hessian of the barrier
//! objective; the equality `sum(nu) = 1` is handled in the KKT system.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

/// Value, gradient and Hessian at a strictly feasible point.
pub(crate) struct Local<T: Scalar> {
    pub value: T,
    pub grad: DVector<T>,
    pub hess: DMatrix<T>,
}

/// Objective over `z = (nu_1..nu_K, t)`; returns `None` outside the domain.
pub(crate) trait BarrierObjective<T: Scalar> {
    fn value(&self, z: &DVector<T>, tau: T) -> Option<T>;
    fn local(&self, z: &DVector<T>, tau: T) -> Option<Local<T>>;
}

const MAX_CENTERING_STEPS: usize = 200;
const DECREMENT_TOL: f64 = 1e-10;

/// Outcome of one centering pass.
pub(crate) struct Centering {
    pub steps: usize,
    /// False when the Newton system became too ill-conditioned to trust.
    pub healthy: bool,
}

/// Minimizes the barrier objective at fixed `tau` starting from `z`.
pub(crate) fn center<T: Scalar, B: BarrierObjective<T>>(obj: &B, z: &mut DVector<T>, tau: T, budget: usize) -> Centering {
    let n = z.len();
    let k = n - 1;
    let mut steps = 0;
    let mut healthy = true;
    while steps < budget.min(MAX_CENTERING_STEPS) {
        let Some(loc) = obj.local(z, tau) else {
            healthy = false;
            break;
        };
        steps += 1;
        // Null-space step for sum(nu) = 1: pivot on the largest weight r and
        // use directions e_i - e_r, which avoids cancelling two large solves.
        let r = (0..k).fold(0, |best, i| if z[i] > z[best] { i } else { best });
        let free: Vec<usize> = (0..n).filter(|&i| i != r).collect();
        let m = free.len();
        let h = &loc.hess;
        let col = |i: usize| if i < k { Some(r) } else { None };
        let reduced = DMatrix::from_fn(m, m, |a, b| {
            let (i, j) = (free[a], free[b]);
            let mut v = h[(i, j)];
            if let Some(r) = col(j) {
                v -= h[(i, r)];
            }
            if let Some(r) = col(i) {
                v -= h[(r, j)];
                if col(j).is_some() {
                    v += h[(r, r)];
                }
            }
            v
        });
        let rhs = DVector::from_fn(m, |a, _| {
            let i = free[a];
            if i < k { loc.grad[i] - loc.grad[r] } else { loc.grad[i] }
        });
        // symmetric diagonal scaling keeps the 1/nu^2 terms from wrecking the factorization
        let scale = reduced.diagonal().map(|v| if v > T::zero() { T::one() / v.sqrt() } else { T::one() });
        let scaled = DMatrix::from_fn(m, m, |i, j| reduced[(i, j)] * scale[i] * scale[j]);
        let mut ridge = T::zero();
        let chol = loop {
            let mut hs = scaled.clone();
            for i in 0..m {
                hs[(i, i)] += ridge;
            }
            if let Some(c) = hs.cholesky() {
                break Some(c);
            }
            ridge = if ridge == T::zero() { T::noise_floor() } else { ridge * T::lit(100.0) };
            if ridge > T::one() {
                break None;
            }
        };
        let Some(chol) = chol else {
            healthy = false;
            break;
        };
        let step_free = -chol.solve(&rhs.component_mul(&scale)).component_mul(&scale);
        let mut dir = DVector::zeros(n);
        for (a, &i) in free.iter().enumerate() {
            dir[i] = step_free[a];
            if i < k {
                dir[r] -= step_free[a];
            }
        }
        let slope = loc.grad.dot(&dir);
        // squared Newton decrement
        let decrement = -slope;
        if !(decrement > T::lit(DECREMENT_TOL)) {
            // a negative decrement means the Newton system lost precision
            healthy = decrement > -T::lit(1e-7);
            break;
        }
        let mut step = T::one();
        let mut moved = false;
        while step > T::lit(1e-14) {
            let cand = &*z + &dir * step;
            if cand.rows(0, k).iter().all(|v| *v > T::zero()) {
                if let Some(v) = obj.value(&cand, tau) {
                    // inside the quadratic region the value test is dominated by rounding
                    if decrement < T::lit(0.25) || v <= loc.value + T::lit(0.25) * step * slope {
                        *z = cand;
                        moved = true;
                        break;
                    }
                }
            }
            step *= T::lit(0.5);
        }
        if !moved {
            healthy = decrement < T::lit(1e-6);
            break;
        }
        let total = z.rows(0, k).sum();
        z.rows_mut(0, k).unscale_mut(total);
    }
    Centering { steps, healthy }
}
