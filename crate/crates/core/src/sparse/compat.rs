//! Compatibility constant `phi^2(M, S)` by sign-pattern enumeration.
//!
//! Fixing the signs `sigma` of `theta_S` turns `||theta_S||_1 = 1` into a
//! linear constraint, so each pattern is a convex QP over a signed simplex
//! times an l1 ball. Patterns `sigma` and `-sigma` give the same value, so
//! only half are solved. Each QP is solved by accelerated projected gradient
//! and stopped on its Frank-Wolfe duality gap.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{min_eigenvalue, GramMatrix};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Largest support enumerated exactly.
pub const MAX_SUPPORT: usize = 8;
/// Limits for the minimum over all supports of size `s`.
pub const MAX_DIM_FOR_SUBSETS: usize = 20;
pub const MAX_SPARSITY_FOR_SUBSETS: usize = 4;

const CONE_RADIUS: f64 = 3.0;
const QP_MAX_ITERS: usize = 50_000;
/// Relative Frank-Wolfe gap; objective changes below its square are rounding noise.
const QP_TOL: f64 = 1e-7;

/// Projects `v` onto the probability simplex.
fn project_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = T::zero();
    let mut tau = T::zero();
    for (i, &x) in sorted.iter().enumerate() {
        cum += x;
        let t = (cum - T::one()) / T::from_usize_lossy(i + 1);
        if x - t > T::zero() {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(T::zero())).collect()
}

/// Projects `v` onto the l1 ball of the given radius.
fn project_l1_ball<T: Scalar>(v: &[T], radius: T) -> Vec<T> {
    let norm: T = v.iter().fold(T::zero(), |acc, x| acc + x.abs());
    if norm <= radius {
        return v.to_vec();
    }
    let scaled: Vec<T> = v.iter().map(|x| x.abs() / radius).collect();
    let p = project_simplex(&scaled);
    v.iter().zip(p).map(|(x, pi)| x.signum() * pi * radius).collect()
}

struct Qp<'a, T: Scalar> {
    m: &'a DMatrix<T>,
    on: &'a [usize],
    off: &'a [usize],
    signs: Vec<T>,
}

impl<T: Scalar> Qp<'_, T> {
    fn project(&self, v: &DVector<T>) -> DVector<T> {
        let mut out = DVector::zeros(v.len());
        let signed: Vec<T> = self.on.iter().zip(&self.signs).map(|(&j, s)| v[j] * *s).collect();
        for ((&j, s), p) in self.on.iter().zip(&self.signs).zip(project_simplex(&signed)) {
            out[j] = *s * p;
        }
        let rest: Vec<T> = self.off.iter().map(|&j| v[j]).collect();
        for (&j, p) in self.off.iter().zip(project_l1_ball(&rest, T::lit(CONE_RADIUS))) {
            out[j] = p;
        }
        out
    }

    /// `max_{v feasible} grad^T (theta - v)`, an upper bound on suboptimality.
    fn fw_gap(&self, theta: &DVector<T>, grad: &DVector<T>) -> T {
        let on_min = self
            .on
            .iter()
            .zip(&self.signs)
            .map(|(&j, s)| *s * grad[j])
            .fold(T::max_value().unwrap(), |a, b| a.min(b));
        let off_max = self.off.iter().map(|&j| grad[j].abs()).fold(T::zero(), |a, b| a.max(b));
        grad.dot(theta) - on_min + T::lit(CONE_RADIUS) * off_max
    }

    fn solve(&self, lipschitz: T) -> T {
        let d = self.m.nrows();
        let mut theta = DVector::zeros(d);
        let k = T::from_usize_lossy(self.on.len());
        for (&j, s) in self.on.iter().zip(&self.signs) {
            theta[j] = *s / k;
        }
        let mut y = theta.clone();
        let mut t = T::one();
        let step = T::one() / lipschitz;
        let mut f = theta.dot(&(self.m * &theta));
        let scale = self.m.diagonal().amax().max(T::noise_floor());
        for _ in 0..QP_MAX_ITERS {
            let grad = (self.m * &theta) * T::lit(2.0);
            if self.fw_gap(&theta, &grad) <= T::lit(QP_TOL).max(T::noise_floor()) * scale {
                break;
            }
            let grad_y = (self.m * &y) * T::lit(2.0);
            let next = self.project(&(&y - grad_y * step));
            let f_next = next.dot(&(self.m * &next));
            if f_next > f {
                if t == T::one() {
                    // a plain projected step no longer decreases f
                    break;
                }
                // adaptive restart
                y.copy_from(&theta);
                t = T::one();
                continue;
            }
            let t_next = (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) / T::lit(2.0);
            y = &next + (&next - &theta) * ((t - T::one()) / t_next);
            theta = next;
            f = f_next;
            t = t_next;
        }
        f.max(T::zero())
    }
}

/// `min { |S| theta^T M theta : ||theta_S||_1 = 1, ||theta_{S^c}||_1 <= 3 }`.
pub fn compatibility_constant<T: Scalar>(m: &GramMatrix<T>, support: &[usize]) -> Result<T> {
    let d = m.dim();
    if support.is_empty() {
        return Err(invalid("support", "support must be nonempty"));
    }
    if support.len() > MAX_SUPPORT {
        return Err(Error::EnumerationTooLarge {
            size: support.len(),
            cap: MAX_SUPPORT,
        });
    }
    let mut in_support = vec![false; d];
    for &j in support {
        if j >= d {
            return Err(Error::ArmOutOfRange { index: j, arms: d });
        }
        if in_support[j] {
            return Err(invalid("support", format!("duplicate index {j}")));
        }
        in_support[j] = true;
    }
    let off: Vec<usize> = (0..d).filter(|&j| !in_support[j]).collect();
    let mat = m.matrix();
    let lipschitz = (SymmetricMax::largest(mat) * T::lit(2.0)).max(T::noise_floor());
    let k = support.len();
    let mut best = T::max_value().unwrap();
    for pattern in 0..(1usize << (k - 1)) {
        let signs = (0..k)
            .map(|i| if (pattern >> i) & 1 == 1 { -T::one() } else { T::one() })
            .collect();
        let qp = Qp {
            m: mat,
            on: support,
            off: &off,
            signs,
        };
        best = best.min(qp.solve(lipschitz));
    }
    Ok(best * T::from_usize_lossy(k))
}

struct SymmetricMax;

impl SymmetricMax {
    fn largest<T: Scalar>(m: &DMatrix<T>) -> T {
        m.clone().symmetric_eigenvalues().max()
    }
}

/// `phi^2(M, s)` together with whether it was computed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Compatibility<T: Scalar> {
    pub value: T,
    /// False when enumeration was too large and `sigma_min(M)` was returned.
    pub exact: bool,
}

/// Minimum of [`compatibility_constant`] over all supports of size `s`.
///
/// Beyond `d <= 20, s <= 4` the minimum eigenvalue of `M`, which is a lower
/// bound, is returned with `exact = false`.
pub fn compatibility_constant_s<T: Scalar>(m: &GramMatrix<T>, s: usize) -> Result<Compatibility<T>> {
    let d = m.dim();
    if s == 0 || s > d {
        return Err(invalid("s", format!("sparsity must lie in 1..={d}")));
    }
    if d > MAX_DIM_FOR_SUBSETS || s > MAX_SPARSITY_FOR_SUBSETS {
        log::warn!("compatibility enumeration over d={d}, s={s} too large; using sigma_min");
        return Ok(Compatibility {
            value: min_eigenvalue(m.matrix()).max(T::zero()),
            exact: false,
        });
    }
    let mut best = T::max_value().unwrap();
    let mut subset: Vec<usize> = (0..s).collect();
    loop {
        best = best.min(compatibility_constant(m, &subset)?);
        // next combination in lexicographic order
        let mut i = s;
        while i > 0 && subset[i - 1] == d - s + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..s {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok(Compatibility { value: best, exact: true })
}
