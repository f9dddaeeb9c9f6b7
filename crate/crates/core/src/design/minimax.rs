//! Designs minimizing the worst-case variance `max_{y in Y} y^T M(nu)^{-1} y`
//! over a finite target set `Y`.
//!
//! The XY-allocation takes `Y` to be the pairwise arm differences; the
//! coordinate-variance design used by PopArt takes `Y` to be the standard
//! basis. The epigraph form `min t s.t. y^T M(nu)^{-1} y <= t` is solved with
//! a log barrier and Newton centering over a working set of targets that
//! grows until no target outside it is violated. For any weights `w` on `Y`,
//! `2 h_w(nu) - max_k s_k(nu)` with `h_w = sum_y w_y y^T M^{-1} y` and
//! `s_k = sum_y w_y (a(k)^T M^{-1} y)^2` lower-bounds the optimum (convexity
//! of `h_w`); the barrier's dual weights supply `w`.

use nalgebra::{DMatrix, DVector};

use super::barrier::{center, BarrierObjective, Local};
use super::{arm_rank, weighted_gram, Allocation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cap on barrier updates plus working-set changes.
const MAX_ROUNDS: usize = 400;

struct Variances<T: Scalar> {
    /// `f_y = y^T M^{-1} y`
    f: DVector<T>,
    /// `u[(k, y)] = a(k)^T M^{-1} y`
    u: DMatrix<T>,
    /// `G = A M^{-1} A^T`
    g: Option<DMatrix<T>>,
}

fn variances<T: Scalar>(arms: &DMatrix<T>, targets: &DMatrix<T>, nu: &DVector<T>, with_g: bool) -> Option<Variances<T>> {
    let m = weighted_gram(nu, arms);
    let chol = m.cholesky()?;
    let b = chol.solve(&targets.transpose());
    let f = b.component_mul(&targets.transpose()).row_sum().transpose();
    let u = arms * &b;
    let g = with_g.then(|| arms * chol.solve(&arms.transpose()));
    Some(Variances { f, u, g })
}

struct MinimaxBarrier<'a, T: Scalar> {
    arms: &'a DMatrix<T>,
    targets: DMatrix<T>,
}

impl<T: Scalar> MinimaxBarrier<'_, T> {
    fn split(&self, z: &DVector<T>) -> (DVector<T>, T) {
        let k = self.arms.nrows();
        (z.rows(0, k).into_owned(), z[k])
    }
}

impl<T: Scalar> BarrierObjective<T> for MinimaxBarrier<'_, T> {
    fn value(&self, z: &DVector<T>, tau: T) -> Option<T> {
        let (nu, t) = self.split(z);
        let v = variances(self.arms, &self.targets, &nu, false)?;
        let mut acc = tau * t;
        for f in v.f.iter() {
            let slack = t - *f;
            if slack <= T::zero() {
                return None;
            }
            acc -= slack.ln();
        }
        Some(nu.iter().fold(acc, |a, w| a - w.ln()))
    }

    fn local(&self, z: &DVector<T>, tau: T) -> Option<Local<T>> {
        let k = self.arms.nrows();
        let (nu, t) = self.split(z);
        let v = variances(self.arms, &self.targets, &nu, true)?;
        let inv_slack = v.f.map(|f| T::one() / (t - f));
        if inv_slack.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return None;
        }
        let value = self.value(z, tau)?;
        let sq = v.u.component_mul(&v.u);
        let inv_slack_sq = inv_slack.component_mul(&inv_slack);

        let mut grad = DVector::zeros(k + 1);
        let g_nu = -(&sq * &inv_slack) - nu.map(|w| T::one() / w);
        grad.rows_mut(0, k).copy_from(&g_nu);
        grad[k] = tau - inv_slack.sum();

        let scaled_sq = DMatrix::from_fn(sq.nrows(), sq.ncols(), |i, j| sq[(i, j)] * inv_slack_sq[j]);
        let scaled_u = DMatrix::from_fn(v.u.nrows(), v.u.ncols(), |i, j| v.u[(i, j)] * inv_slack[j] * T::lit(2.0));
        let g = v.g.expect("requested");
        let h_nu = &scaled_sq * sq.transpose() + (&scaled_u * v.u.transpose()).component_mul(&g);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        hess.view_mut((0, 0), (k, k)).copy_from(&h_nu);
        for i in 0..k {
            hess[(i, i)] += T::one() / (nu[i] * nu[i]);
        }
        let cross = &sq * &inv_slack_sq;
        hess.view_mut((0, k), (k, 1)).copy_from(&cross);
        hess.view_mut((k, 0), (1, k)).copy_from(&cross.transpose());
        hess[(k, k)] = inv_slack_sq.sum();
        Some(Local { value, grad, hess })
    }
}

/// Lower bound `2 h_w - max_k s_k` for target weights `w`.
fn lower_bound<T: Scalar>(v: &Variances<T>, w: &DVector<T>) -> T {
    let h = w.dot(&v.f);
    let s = v.u.component_mul(&v.u) * w;
    h + h - s.max()
}

/// Solves `min_nu max_{y in rows(targets)} y^T M(nu)^{-1} y` where `M(nu)` is
/// built from the rows of `arms`.
///
/// `tol` is relative: the solver stops when `(objective - lower_bound) /
/// objective <= tol`, and `certificate_gap` reports that ratio. `max_iters`
/// caps the total number of Newton steps.
pub fn minimax_variance_design<T: Scalar>(
    arms: &DMatrix<T>,
    targets: &DMatrix<T>,
    tol: T,
    max_iters: usize,
) -> Result<Allocation<T>> {
    let (k, d) = arms.shape();
    if k == 0 || d == 0 {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "empty arm set".into(),
        });
    }
    if targets.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: targets.ncols(),
        });
    }
    if targets.nrows() == 0 {
        return Err(Error::InvalidParameter {
            name: "targets",
            reason: "empty target set".into(),
        });
    }
    if !(tol > T::zero()) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: "must be positive".into(),
        });
    }
    let rank = arm_rank(arms);
    if rank < d {
        return Err(Error::RankDeficient { rank, dim: d });
    }

    let m_all = targets.nrows();
    let uniform = DVector::from_element(k, T::one() / T::from_usize_lossy(k));
    let initial = variances(arms, targets, &uniform, false)
        .ok_or_else(|| Error::Numerical("singular initial design".into()))?;
    let mut order: Vec<usize> = (0..m_all).collect();
    order.sort_by(|&a, &b| initial.f[b].partial_cmp(&initial.f[a]).unwrap_or(std::cmp::Ordering::Equal));
    let batch = (2 * d + 2).max(8);
    let mut working: Vec<usize> = order.iter().copied().take(batch).collect();
    let mut in_working = vec![false; m_all];
    for &i in &working {
        in_working[i] = true;
    }

    let mut nu = uniform;
    let mut best_nu = nu.clone();
    let mut best_obj = initial.f.max();
    let mut best_lower = T::zero();
    let mut iters = 0;
    let mut converged = false;

    let mut rounds = 0;
    'outer: loop {
        let barrier = MinimaxBarrier {
            arms,
            targets: targets.select_rows(&working),
        };
        let start = variances(arms, &barrier.targets, &nu, false)
            .ok_or_else(|| Error::Numerical("singular design".into()))?;
        let f0 = start.f.max();
        let mut z = DVector::zeros(k + 1);
        z.rows_mut(0, k).copy_from(&nu);
        z[k] = f0 * T::lit(1.5);
        let constraints = T::from_usize_lossy(working.len() + k);
        let mut tau = constraints / f0;

        loop {
            rounds += 1;
            if rounds > MAX_ROUNDS {
                break 'outer;
            }
            let pass = center(&barrier, &mut z, tau, max_iters.saturating_sub(iters).max(1));
            iters += pass.steps;
            let (cur, t) = barrier.split(&z);
            nu = cur;
            let full = variances(arms, targets, &nu, false)
                .ok_or_else(|| Error::Numerical("design became singular".into()))?;
            let obj = full.f.max();
            if obj < best_obj {
                best_obj = obj;
                best_nu.copy_from(&nu);
            }
            let local = variances(arms, &barrier.targets, &nu, false)
                .ok_or_else(|| Error::Numerical("design became singular".into()))?;
            let mut w = local.f.map(|f| T::one() / (t - f));
            let total = w.sum();
            w /= total;
            best_lower = best_lower.max(lower_bound(&local, &w));

            if best_obj - best_lower <= tol * best_obj {
                converged = true;
                break 'outer;
            }
            if iters >= max_iters {
                break 'outer;
            }
            let working_obj = local.f.max();
            if working_obj - best_lower <= tol * T::lit(0.5) * working_obj {
                // converged on the working set; add violated targets
                let mut violated: Vec<usize> = (0..m_all)
                    .filter(|&i| !in_working[i] && full.f[i] > working_obj)
                    .collect();
                if violated.is_empty() {
                    if !pass.healthy || tau * T::noise_floor() * working_obj > constraints {
                        break 'outer;
                    }
                    tau *= T::lit(10.0);
                    continue;
                }
                violated.sort_by(|&a, &b| full.f[b].partial_cmp(&full.f[a]).unwrap_or(std::cmp::Ordering::Equal));
                for &i in violated.iter().take(batch) {
                    in_working[i] = true;
                    working.push(i);
                }
                continue 'outer;
            }
            if !pass.healthy || tau * T::noise_floor() * working_obj > constraints {
                break 'outer;
            }
            tau *= T::lit(10.0);
        }
    }

    let mut alloc = Allocation::new(best_nu, best_obj);
    alloc.certificate_gap = ((best_obj - best_lower) / best_obj).max(T::zero());
    alloc.iterations = iters;
    alloc.converged = converged;
    if !converged {
        log::warn!(
            "minimax design stopped after {iters} Newton steps, relative gap {:e}",
            alloc.certificate_gap.as_f64()
        );
    }
    Ok(alloc)
}

/// Pairwise differences `a(i) - a(j)`, `i < j`, skipping zero vectors.
pub(crate) fn pairwise_differences<T: Scalar>(arms: &DMatrix<T>) -> DMatrix<T> {
    let (k, d) = arms.shape();
    let mut rows: Vec<T> = Vec::new();
    let mut count = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            let diff = arms.row(i) - arms.row(j);
            if diff.iter().any(|v| *v != T::zero()) {
                rows.extend(diff.iter().copied());
                count += 1;
            }
        }
    }
    DMatrix::from_row_slice(count, d, &rows)
}

/// XY-allocation: minimizes the worst variance over pairwise arm differences.
pub fn xy_allocation<T: Scalar>(arms: &DMatrix<T>, tol: T, max_iters: usize) -> Result<Allocation<T>> {
    if arms.nrows() < 2 {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "XY-allocation needs at least two arms".into(),
        });
    }
    let diffs = pairwise_differences(arms);
    if diffs.nrows() == 0 {
        return Err(Error::InvalidParameter {
            name: "arms",
            reason: "all arms coincide; difference set is empty".into(),
        });
    }
    minimax_variance_design(arms, &diffs, tol, max_iters)
}

/// Minimizes `max_i (M(nu)^{-1})_{ii}`; the optimum is PopArt's `H_*^2`.
pub fn diagonal_variance_design<T: Scalar>(arms: &DMatrix<T>, tol: T, max_iters: usize) -> Result<Allocation<T>> {
    let d = arms.ncols();
    minimax_variance_design(arms, &DMatrix::identity(d, d), tol, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(arms: &DMatrix<f64>, targets: &DMatrix<f64>, nu: &DVector<f64>) -> f64 {
        let m = weighted_gram(nu, arms);
        let inv = m.try_inverse().unwrap();
        targets
            .row_iter()
            .map(|y| (y * &inv * y.transpose())[(0, 0)])
            .fold(0.0, f64::max)
    }

    #[test]
    fn xy_symmetric_one_dimensional() {
        let a = xy_allocation(&dmatrix![1.0f64; -1.0], 1e-9, 1000).unwrap();
        assert!((a.weights[0] - 0.5).abs() < 1e-9);
        assert!((a.objective - 4.0).abs() < 1e-9);
    }

    #[test]
    fn xy_orthonormal_pair() {
        let a = xy_allocation(&dmatrix![1.0f64, 0.0; 0.0, 1.0], 1e-9, 1000).unwrap();
        assert!((a.weights[0] - 0.5).abs() < 1e-9);
        assert!((a.objective - 4.0).abs() < 1e-9);
    }

    #[test]
    fn xy_identical_arms_rejected() {
        assert!(xy_allocation(&dmatrix![1.0f64; 1.0], 1e-6, 10).is_err());
        assert!(xy_allocation(&dmatrix![1.0f64, 0.0; 1.0, 0.0], 1e-6, 10).is_err());
    }

    #[test]
    fn diagonal_design_on_basis() {
        let a = diagonal_variance_design(&dmatrix![1.0f64, 0.0; 0.0, 1.0], 1e-9, 1000).unwrap();
        assert!((a.objective - 2.0).abs() < 1e-9);
        // brute-force simplex grid
        let mut best = f64::INFINITY;
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            best = best.min((1.0 / p).max(1.0 / (1.0 - p)));
        }
        assert!((a.objective - best).abs() < 1e-9);
    }

    #[test]
    fn certificate_holds_against_random_designs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let arms = DMatrix::<f64>::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
            let diffs = pairwise_differences(&arms);
            let tol = 1e-3;
            let sol = minimax_variance_design(&arms, &diffs, tol, 20_000).unwrap();
            assert!(sol.converged, "gap {}", sol.certificate_gap);
            let achieved = objective(&arms, &diffs, &sol.weights);
            assert!((achieved - sol.objective).abs() < 1e-9 * achieved);
            for _ in 0..300 {
                let raw = DVector::<f64>::from_fn(8, |_, _| rng.random::<f64>());
                let nu = &raw / raw.sum();
                assert!(objective(&arms, &diffs, &nu) >= sol.objective * (1.0 - tol) - 1e-12);
            }
        }
    }
}
