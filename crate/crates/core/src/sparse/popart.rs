//! PopArt: population-covariance one-sample estimates aggregated per
//! coordinate by the Catoni robust mean, then thresholded.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::design::{diagonal_variance_design, weighted_gram, Allocation, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::error::{invalid, Error, Result};
use crate::model::Environment;
use crate::scalar::Scalar;

/// Catoni influence `sign(x) log(1 + |x| + x^2/2)`.
pub fn catoni_psi<T: Scalar>(x: T) -> T {
    let a = x.abs();
    x.signum() * (a + a * a * T::lit(0.5)).ln_1p()
}

/// Root `y` of `sum_i psi(alpha (z_i - y)) = 0`, found by bisection.
pub fn catoni<T: Scalar>(samples: &[T], alpha: T) -> Result<T> {
    if samples.is_empty() {
        return Err(invalid("samples", "Catoni estimate needs at least one sample"));
    }
    if !(alpha > T::zero()) {
        return Err(invalid("alpha", "must be positive"));
    }
    if samples.iter().any(|z| !z.is_finite()) {
        return Err(invalid("samples", "non-finite sample"));
    }
    let (mut lo, mut hi) = samples
        .iter()
        .fold((samples[0], samples[0]), |(lo, hi), &z| (lo.min(z), hi.max(z)));
    let score = |y: T| samples.iter().fold(T::zero(), |acc, &z| acc + catoni_psi(alpha * (z - y)));
    let tol = T::lit(1e-10).max(T::noise_floor() * lo.abs().max(hi.abs()));
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) * T::lit(0.5);
        // score is decreasing in y
        if score(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) * T::lit(0.5))
}

/// Constants derived from the optimal coordinate-variance design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopArtConfig<T: Scalar> {
    pub nu_star: Allocation<T>,
    /// `min_nu max_i (M(nu)^{-1})_{ii}`.
    pub h2_star: T,
    pub lambda_pa: T,
    pub c_pa: T,
    pub g: T,
    pub t1: usize,
    pub t2: usize,
}

/// `log2 s` floored at one so that `s = 1` stays well defined.
pub(crate) fn log2_floor_one<T: Scalar>(s: usize) -> T {
    T::from_usize_lossy(s).log2().max(T::one())
}

impl<T: Scalar> PopArtConfig<T> {
    /// Budget split and Catoni/threshold constants for a given design.
    pub fn from_design(nu_star: Allocation<T>, total_t: usize, theta_min: T, s: usize) -> Result<Self> {
        if !(theta_min > T::zero()) {
            return Err(invalid("theta_min", "must be positive"));
        }
        if s == 0 {
            return Err(invalid("s", "sparsity must be positive"));
        }
        let h2 = nu_star.objective;
        let lambda_pa = (T::lit(2.0) * h2).sqrt().min(theta_min * T::lit(0.5));
        let c_pa = T::lit(2.0) * h2 / (lambda_pa * lambda_pa * T::from_usize_lossy(s) * log2_floor_one::<T>(s));
        let t1 = (T::from_usize_lossy(total_t) * c_pa / (T::one() + c_pa)).ceil();
        let t1 = t1.as_f64().clamp(0.0, total_t as f64) as usize;
        let g = lambda_pa * lambda_pa / (T::lit(8.0) * h2);
        Ok(Self {
            nu_star,
            h2_star: h2,
            lambda_pa,
            c_pa,
            g,
            t1,
            t2: total_t - t1,
        })
    }
}

/// Output of the PopArt phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopArtEstimate<T: Scalar> {
    /// Catoni aggregates before thresholding.
    pub theta_prime: DVector<T>,
    pub coefficients: DVector<T>,
    pub support: Vec<usize>,
    pub config: PopArtConfig<T>,
}

/// Runs the PopArt phase: solve the design, sample `T1` arms i.i.d. from it,
/// form `M^{-1} a y` per sample, aggregate by Catoni, threshold.
///
/// Arm indices are drawn from `rng`; rewards come from `env`.
pub fn popart_estimate<T: Scalar, E: Environment<T>, R: Rng + ?Sized>(
    arms: &DMatrix<T>,
    env: &mut E,
    rng: &mut R,
    total_t: usize,
    theta_min: T,
    s: usize,
) -> Result<PopArtEstimate<T>> {
    let design = diagonal_variance_design(arms, T::lit(DEFAULT_TOL), DEFAULT_MAX_ITERS)?;
    let m = weighted_gram(&design.weights, arms);
    let config = PopArtConfig::from_design(design, total_t, theta_min, s)?;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::Numerical("population covariance is singular".into()))?;
    let d = arms.ncols();

    let weights: Vec<f64> = config.nu_star.weights.iter().map(|w| w.as_f64().max(0.0)).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    let pulls: Vec<usize> = (0..config.t1).map(|_| sampler.sample(rng)).collect();

    let mut per_coord: Vec<Vec<T>> = vec![Vec::with_capacity(config.t1); d];
    let projected = arms * &m_inv; // row k is (M^{-1} a(k))^T
    for &k in &pulls {
        let y = env.pull(k)?;
        for (i, col) in per_coord.iter_mut().enumerate() {
            col.push(projected[(k, i)] * y);
        }
    }

    let g = config.g;
    let inflation = T::one() + T::lit(2.0) * g / (T::one() - T::lit(2.0) * g);
    let mut theta_prime = DVector::zeros(d);
    let mut coefficients = DVector::zeros(d);
    let mut support = Vec::new();
    for i in 0..d {
        let mii = m_inv[(i, i)];
        if per_coord[i].is_empty() {
            continue;
        }
        let alpha = (g / (mii * inflation)).sqrt();
        let est = catoni(&per_coord[i], alpha)?;
        theta_prime[i] = est;
        if est.abs() >= (T::lit(8.0) * mii * g).sqrt() {
            coefficients[i] = est;
            support.push(i);
        }
    }
    Ok(PopArtEstimate {
        theta_prime,
        coefficients,
        support,
        config,
    })
}
