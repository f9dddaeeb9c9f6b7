//! Error-probability bounds, analytically chosen hyperparameters and
//! cross-validated penalty selection.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::ceil_log2;
use crate::design::{e_optimal_design, gram, DEFAULT_MAX_ITERS, E_OPT_TOL};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::sparse::{compatibility_constant_s, threshold, LassoSolver, RegressionProblem, LASSO_MAX_ITERS, LASSO_TOL};

/// Relative slack for comparisons that hold with equality in exact arithmetic.
pub const EXACT_SLACK: f64 = 1e-12;

/// One `prefactor * exp(-exponent)` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Term<T> {
    pub prefactor: T,
    pub exponent: T,
}

impl<T: Scalar> Term<T> {
    fn raw(&self) -> T {
        self.prefactor * (-self.exponent).exp()
    }
}

/// A probability bound: clipped value, the unclipped sum of its terms, and
/// the terms themselves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bound<T> {
    pub value: T,
    pub raw: T,
    pub terms: Vec<Term<T>>,
    /// True when the bound carries no information: it clips to one or a
    /// hypothesis fails.
    pub vacuous: bool,
}

impl<T: Scalar> Bound<T> {
    fn from_terms(terms: Vec<Term<T>>) -> Self {
        let raw = terms.iter().fold(T::zero(), |acc, t| acc + t.raw());
        let clipped = terms.iter().fold(T::zero(), |acc, t| acc + t.raw().min(T::one()));
        let value = clipped.min(T::one());
        Self {
            value,
            raw,
            terms,
            vacuous: value >= T::one(),
        }
    }

    fn trivial() -> Self {
        Self {
            value: T::one(),
            raw: T::one(),
            terms: Vec::new(),
            vacuous: true,
        }
    }
}

fn positive<T: Scalar>(name: &'static str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "must be positive and finite"))
    }
}

fn nonnegative<T: Scalar>(name: &'static str, v: T) -> Result<()> {
    if v >= T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "must be nonnegative and finite"))
    }
}

fn nonzero(name: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(name, "must be positive"))
    } else {
        Ok(())
    }
}

fn lit<T: Scalar>(n: usize) -> T {
    T::from_usize_lossy(n)
}

fn floor_log2<T: Scalar>(n: usize) -> T {
    lit::<T>(n).log2().floor()
}

fn theorem1_term<T: Scalar>(t1: usize, lambda_init: T, d: usize, x_max_sq: T) -> Term<T> {
    Term {
        prefactor: lit::<T>(2 * d),
        exponent: lit::<T>(t1) * lambda_init * lambda_init / (T::lit(32.0) * x_max_sq),
    }
}

/// Probability that thresholded Lasso on `T1` samples misses a support
/// coordinate or keeps too many: `2d exp(-T1 lambda^2 / (32 x_max^2))`.
pub fn bound_theorem1<T: Scalar>(t1: usize, lambda_init: T, d: usize, x_max_sq: T) -> Result<Bound<T>> {
    nonzero("d", d)?;
    nonnegative("lambda_init", lambda_init)?;
    positive("x_max_sq", x_max_sq)?;
    Ok(Bound::from_terms(vec![theorem1_term(t1, lambda_init, d, x_max_sq)]))
}

/// OD-LinBAI error bound with `T~ = floor(T / ceil(log2 d))`:
/// `(K + log2 d) exp(-T~ / (16 (1 + d^2/T~) H(d)))`.
pub fn bound_theorem2<T: Scalar>(k: usize, d: usize, budget: usize, hardness_d: T) -> Result<Bound<T>> {
    nonzero("K", k)?;
    nonzero("d", d)?;
    positive("hardness", hardness_d)?;
    let t_tilde = budget / ceil_log2(d).max(1);
    let prefactor = lit::<T>(k) + lit::<T>(d).log2();
    let exponent = if t_tilde == 0 {
        T::zero()
    } else {
        let tt = lit::<T>(t_tilde);
        tt / (T::lit(16.0) * (T::one() + lit::<T>(d * d) / tt) * hardness_d)
    };
    Ok(Bound::from_terms(vec![Term { prefactor, exponent }]))
}

/// Quantities entering the two-phase error bound.
///
/// `gaps` are the sorted suboptimality gaps `Delta_2 <= ... <= Delta_K`; they
/// are only needed to evaluate hardness values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs<T> {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "T1")]
    pub t1: usize,
    pub lambda_init: T,
    pub lambda_thres: T,
    pub theta_min: T,
    /// `4 / phi^2(nu~, s)`.
    pub b: T,
    pub x_max_sq: T,
    #[serde(default)]
    pub gaps: Vec<T>,
    /// PopArt phase ratio, when a PopArt bound is wanted.
    #[serde(default)]
    pub c_pa: Option<T>,
}

impl<T: Scalar> TheoryInputs<T> {
    pub fn t2(&self) -> usize {
        self.t.saturating_sub(self.t1)
    }

    /// `lambda_thres / lambda_init`.
    pub fn c(&self) -> T {
        self.lambda_thres / self.lambda_init
    }

    /// `floor(s (1 + b/c))`.
    pub fn s1(&self) -> usize {
        s1_of(self.s, self.b, self.c())
    }

    /// `s1^2 / T2`.
    pub fn epsilon(&self) -> T {
        let s1 = self.s1();
        lit::<T>(s1 * s1) / lit::<T>(self.t2())
    }

    /// Phase ratio `T1 / T2`.
    pub fn c0(&self) -> T {
        lit::<T>(self.t1) / lit::<T>(self.t2())
    }

    /// `(25/24) b^2 / theta_min^2`.
    pub fn kappa(&self) -> T {
        kappa_of(self.b, self.theta_min)
    }

    /// `theta_min >= lambda_init (c + b s)` with `b > 0` and `0 < T1 < T`.
    pub fn hypothesis_holds(&self) -> bool {
        self.b > T::zero()
            && self.lambda_init > T::zero()
            && self.lambda_thres > T::zero()
            && self.t1 > 0
            && self.t1 < self.t
            && theorem3_condition(self.theta_min, self.lambda_init, self.c(), self.b, self.s)
    }

    /// `H_{2,lin}(m)` from `gaps`, with `m` clamped to `2..=K`.
    pub fn hardness(&self, m: usize) -> Result<T> {
        hardness_from_gaps(&self.gaps, m)
    }

    fn validate(&self) -> Result<()> {
        nonzero("K", self.k)?;
        nonzero("d", self.d)?;
        nonzero("s", self.s)?;
        nonzero("T", self.t)?;
        if self.t1 > self.t {
            return Err(invalid("T1", "exceeds T"));
        }
        positive("lambda_init", self.lambda_init)?;
        positive("lambda_thres", self.lambda_thres)?;
        positive("theta_min", self.theta_min)?;
        positive("x_max_sq", self.x_max_sq)?;
        nonnegative("b", self.b)
    }
}

/// `max_{2 <= i <= m} i / Delta_i^2` with `m` clamped to `2..=K`.
pub fn hardness_from_gaps<T: Scalar>(gaps: &[T], m: usize) -> Result<T> {
    if gaps.is_empty() {
        return Err(invalid("gaps", "no gaps given"));
    }
    if gaps.iter().any(|g| !(*g > T::zero())) {
        return Err(invalid("gaps", "gaps must be positive"));
    }
    let m = m.clamp(2, gaps.len() + 1);
    Ok((2..=m)
        .map(|i| lit::<T>(i) / (gaps[i - 2] * gaps[i - 2]))
        .fold(T::zero(), |a, b| a.max(b)))
}

fn kappa_of<T: Scalar>(b: T, theta_min: T) -> T {
    T::lit(25.0 / 24.0) * b * b / (theta_min * theta_min)
}

fn slack<T: Scalar>() -> T {
    T::lit(EXACT_SLACK).max(T::noise_floor())
}

fn s1_of<T: Scalar>(s: usize, b: T, c: T) -> usize {
    let raw = lit::<T>(s) * (T::one() + b / c);
    (raw * (T::one() + slack::<T>())).floor().as_f64().max(0.0) as usize
}

fn theorem3_condition<T: Scalar>(theta_min: T, lambda_init: T, c: T, b: T, s: usize) -> bool {
    let rhs = lambda_init * (c + b * lit::<T>(s));
    theta_min >= rhs * (T::one() - slack::<T>())
}

/// Two-phase bound with its derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem3Bound<T> {
    pub bound: Bound<T>,
    pub s1: usize,
    pub epsilon: T,
    pub hypothesis_holds: bool,
}

/// Elimination term of the two-phase bound:
/// `(K + log2 d) exp(-floor(T2 / log2 s1) / (16 (1 + s1^2/T2) H(s1)))`.
fn phase_two_term<T: Scalar>(k: usize, d: usize, t2: usize, s1: usize, hardness_s1: T) -> Term<T> {
    let prefactor = lit::<T>(k) + lit::<T>(d).log2();
    if t2 == 0 {
        return Term {
            prefactor,
            exponent: T::zero(),
        };
    }
    let rounds = lit::<T>(s1).log2().max(T::one());
    let per_round = (lit::<T>(t2) / rounds).floor();
    let eps = lit::<T>(s1 * s1) / lit::<T>(t2);
    Term {
        prefactor,
        exponent: per_round / (T::lit(16.0) * (T::one() + eps) * hardness_s1),
    }
}

/// Lasso-OD error bound: phase-two elimination term plus the support-recovery
/// term. Returns a vacuous bound when `theta_min >= lambda_init (c + b s)` or
/// `b > 0` fails.
pub fn bound_theorem3<T: Scalar>(inputs: &TheoryInputs<T>, hardness_s1: T) -> Result<Theorem3Bound<T>> {
    inputs.validate()?;
    positive("hardness", hardness_s1)?;
    let hypothesis_holds = inputs.hypothesis_holds();
    let s1 = inputs.s1();
    let epsilon = inputs.epsilon();
    let bound = if hypothesis_holds {
        Bound::from_terms(vec![
            phase_two_term(inputs.k, inputs.d, inputs.t2(), s1, hardness_s1),
            theorem1_term(inputs.t1, inputs.lambda_init, inputs.d, inputs.x_max_sq),
        ])
    } else {
        Bound::trivial()
    };
    Ok(Theorem3Bound {
        bound,
        s1,
        epsilon,
        hypothesis_holds,
    })
}

/// Bound at the analytical hyperparameters:
/// `(K + log2 d + 2d) exp(-T / (16 floor(log2(s+s^2)) (1+eps) H(s+s^2) (1+c0)))`
/// with `eps = (1+c0)(s+s^2)^2 / T`.
pub fn bound_corollary1<T: Scalar>(k: usize, d: usize, s: usize, budget: usize, c0: T, hardness: T) -> Result<Bound<T>> {
    nonzero("K", k)?;
    nonzero("d", d)?;
    nonzero("s", s)?;
    nonzero("T", budget)?;
    nonnegative("c0", c0)?;
    positive("hardness", hardness)?;
    let m = s + s * s;
    let eps = (T::one() + c0) * lit::<T>(m * m) / lit::<T>(budget);
    let exponent =
        lit::<T>(budget) / (T::lit(16.0) * floor_log2::<T>(m) * (T::one() + eps) * hardness * (T::one() + c0));
    Ok(Bound::from_terms(vec![Term {
        prefactor: lit::<T>(k + 2 * d) + lit::<T>(d).log2(),
        exponent,
    }]))
}

/// PopArt-OD bound:
/// `(K + log2 d + 2d) exp(-T / (16 floor(log2 s) (1+eps) H(s) (1+c_PA)))` with
/// `eps = (1+c_PA) s^2 / T`. `floor(log2 s)` is taken as at least one.
pub fn bound_theorem5<T: Scalar>(k: usize, d: usize, s: usize, budget: usize, c_pa: T, hardness_s: T) -> Result<Bound<T>> {
    nonzero("K", k)?;
    nonzero("d", d)?;
    nonzero("s", s)?;
    nonzero("T", budget)?;
    nonnegative("c_PA", c_pa)?;
    positive("hardness", hardness_s)?;
    let eps = (T::one() + c_pa) * lit::<T>(s * s) / lit::<T>(budget);
    let rounds = floor_log2::<T>(s).max(T::one());
    let exponent = lit::<T>(budget) / (T::lit(16.0) * rounds * (T::one() + eps) * hardness_s * (T::one() + c_pa));
    Ok(Bound::from_terms(vec![Term {
        prefactor: lit::<T>(k + 2 * d) + lit::<T>(d).log2(),
        exponent,
    }]))
}

/// Hyperparameters chosen without knowledge of the hardness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticalHyperparameters<T> {
    pub kappa: T,
    pub lambda_init: T,
    pub lambda_thres: T,
    /// `lambda_thres / lambda_init`.
    pub c: T,
    pub s1: usize,
    /// Phase ratio `T1 / T2` targeted by the split.
    pub c0: T,
    pub t1: usize,
    pub t2: usize,
    /// Whether `theta_min >= lambda_init (c + b s)` holds at these values.
    pub hypothesis_holds: bool,
}

/// `kappa = (25/24) b^2/theta_min^2`, `lambda_init = 1/sqrt(kappa (s+s^2))`,
/// `lambda_thres = (b/s) lambda_init`,
/// `c0 = 25 b^2 x_max^2 / (3 theta_min^2 log2(s+s^2))` and
/// `T1 = round(T c0/(1+c0))`.
pub fn analytical_hyperparameters<T: Scalar>(
    b: T,
    theta_min: T,
    s: usize,
    x_max_sq: T,
    budget: usize,
) -> Result<AnalyticalHyperparameters<T>> {
    positive("b", b)?;
    positive("theta_min", theta_min)?;
    nonzero("s", s)?;
    positive("x_max_sq", x_max_sq)?;
    nonzero("T", budget)?;
    let m = s + s * s;
    let kappa = kappa_of(b, theta_min);
    let lambda_init = T::one() / (kappa * lit::<T>(m)).sqrt();
    let lambda_thres = b / lit::<T>(s) * lambda_init;
    let c = lambda_thres / lambda_init;
    let s1 = s1_of(s, b, c);
    let c0 = T::lit(25.0) * b * b * x_max_sq / (T::lit(3.0) * theta_min * theta_min * lit::<T>(m).log2());
    let t1 = (lit::<T>(budget) * c0 / (T::one() + c0)).round().as_f64().clamp(0.0, budget as f64) as usize;
    let hypothesis_holds = theorem3_condition(theta_min, lambda_init, c, b, s);
    if !hypothesis_holds {
        log::warn!("analytical hyperparameters violate theta_min >= lambda_init (c + b s) at s = {s}");
    }
    if s1 != m {
        log::warn!("analytical hyperparameters give s1 = {s1}, expected {m}");
    }
    Ok(AnalyticalHyperparameters {
        kappa,
        lambda_init,
        lambda_thres,
        c,
        s1,
        c0,
        t1,
        t2: budget - t1,
        hypothesis_holds,
    })
}

/// Smallest `T1` in `1..T` at which the support-recovery exponent reaches the
/// elimination exponent of phase 2 with hardness `hardness_s1`; `T - 1` when
/// no split balances them.
pub fn balanced_t1<T: Scalar>(budget: usize, s1: usize, hardness_s1: T, lambda_init: T, x_max_sq: T) -> Result<usize> {
    if budget < 2 {
        return Err(invalid("T", "need at least two pulls to split"));
    }
    positive("hardness", hardness_s1)?;
    positive("lambda_init", lambda_init)?;
    positive("x_max_sq", x_max_sq)?;
    let phase_one_wins = |t1: usize| {
        let e1 = theorem1_term(t1, lambda_init, 1, x_max_sq).exponent;
        let e2 = phase_two_term(1, 1, budget - t1, s1, hardness_s1).exponent;
        e1 >= e2
    };
    let (mut lo, mut hi) = (1, budget - 1);
    if !phase_one_wins(hi) {
        return Ok(hi);
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if phase_one_wins(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// `max_j sum_k nu_k a(k)_j^2`.
pub fn x_max_sq<T: Scalar>(weights: &DVector<T>, arms: &DMatrix<T>) -> Result<T> {
    if weights.len() != arms.nrows() {
        return Err(Error::DimensionMismatch {
            expected: arms.nrows(),
            got: weights.len(),
        });
    }
    let sq = arms.map(|v| v * v);
    Ok((sq.transpose() * weights).max())
}

/// Design-free relaxation `max_k ||a(k)||_inf^2`.
pub fn x_max_sq_relaxed<T: Scalar>(arms: &DMatrix<T>) -> T {
    arms.iter().fold(T::zero(), |acc, v| acc.max(*v * *v))
}

/// Everything needed to run Lasso-OD with analytical hyperparameters on one
/// arm set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticalPlan<T> {
    pub hyper: AnalyticalHyperparameters<T>,
    pub phi_sq: T,
    /// False when the compatibility constant was replaced by `sigma_min`.
    pub phi_exact: bool,
    pub b: T,
    pub x_max_sq: T,
    /// Phase-one budget actually used.
    pub t1: usize,
    pub t2: usize,
    /// Whether `t1` came from balancing with a known hardness.
    pub balanced: bool,
}

/// Computes `b` and `x_max^2` from the continuous E-optimal design, then the
/// analytical hyperparameters. With `hardness_s1` the phase split balances
/// the two exponents of the two-phase bound instead of using `c0`.
pub fn analytical_plan<T: Scalar>(
    arms: &DMatrix<T>,
    theta_min: T,
    s: usize,
    budget: usize,
    hardness_s1: Option<T>,
) -> Result<AnalyticalPlan<T>> {
    let design = e_optimal_design(arms, T::lit(E_OPT_TOL), DEFAULT_MAX_ITERS)?;
    let m = gram(&design.weights, arms)?;
    let compat = compatibility_constant_s(&m, s)?;
    if !(compat.value > T::zero()) {
        return Err(Error::Numerical("compatibility constant is zero; b is undefined".into()));
    }
    let b = T::lit(4.0) / compat.value;
    let x2 = x_max_sq(&design.weights, arms)?;
    let hyper = analytical_hyperparameters(b, theta_min, s, x2, budget)?;
    let (t1, t2, balanced) = match hardness_s1 {
        Some(h) => {
            let t1 = balanced_t1(budget, hyper.s1, h, hyper.lambda_init, x2)?;
            (t1, budget - t1, true)
        }
        None => (hyper.t1, hyper.t2, false),
    };
    Ok(AnalyticalPlan {
        hyper,
        phi_sq: compat.value,
        phi_exact: compat.exact,
        b,
        x_max_sq: x2,
        t1,
        t2,
        balanced,
    })
}

/// Every bound that the given inputs allow.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport<T> {
    pub c: T,
    pub s1: usize,
    pub epsilon: T,
    pub kappa: T,
    pub c0: T,
    pub hypothesis_holds: bool,
    pub theorem1: Bound<T>,
    pub theorem2: Option<Bound<T>>,
    pub theorem3: Option<Theorem3Bound<T>>,
    pub corollary1: Option<Bound<T>>,
    pub theorem5: Option<Bound<T>>,
}

/// Evaluates all bounds; those needing hardness are skipped when `gaps` is
/// empty. The corollary uses the analytical `c0` for the given `b`, `x_max^2`
/// and `theta_min`.
pub fn evaluate_bounds<T: Scalar>(inputs: &TheoryInputs<T>) -> Result<BoundsReport<T>> {
    inputs.validate()?;
    let theorem1 = bound_theorem1(inputs.t1, inputs.lambda_init, inputs.d, inputs.x_max_sq)?;
    let has_gaps = !inputs.gaps.is_empty();
    let (mut theorem2, mut theorem3, mut corollary1, mut theorem5) = (None, None, None, None);
    if has_gaps {
        theorem2 = Some(bound_theorem2(inputs.k, inputs.d, inputs.t, inputs.hardness(inputs.d)?)?);
        theorem3 = Some(bound_theorem3(inputs, inputs.hardness(inputs.s1())?)?);
        if inputs.b > T::zero() {
            let m = inputs.s + inputs.s * inputs.s;
            let hyper = analytical_hyperparameters(inputs.b, inputs.theta_min, inputs.s, inputs.x_max_sq, inputs.t)?;
            corollary1 = Some(bound_corollary1(inputs.k, inputs.d, inputs.s, inputs.t, hyper.c0, inputs.hardness(m)?)?);
        }
        if let Some(c_pa) = inputs.c_pa {
            theorem5 = Some(bound_theorem5(inputs.k, inputs.d, inputs.s, inputs.t, c_pa, inputs.hardness(inputs.s)?)?);
        }
    }
    Ok(BoundsReport {
        c: inputs.c(),
        s1: inputs.s1(),
        epsilon: inputs.epsilon(),
        kappa: inputs.kappa(),
        c0: inputs.c0(),
        hypothesis_holds: inputs.hypothesis_holds(),
        theorem1,
        theorem2,
        theorem3,
        corollary1,
        theorem5,
    })
}

/// Settings of the penalty search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub mc_repeats: usize,
    /// Weight of `P(||theta||_0 < s)`.
    pub c1: f64,
    /// Weight of `E[1{||theta||_0 > s} ||theta||_0]`.
    pub c2: f64,
    /// Grid narrowing steps after the initial scan.
    pub narrowing_rounds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            mc_repeats: 3,
            c1: 200.0,
            c2: 5.0,
            narrowing_rounds: 3,
        }
    }
}

/// Selected penalties and their estimated loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSelection<T> {
    pub lambda_init: T,
    pub lambda_thres: T,
    pub loss: T,
    /// Distinct `lambda_init` values for which Lasso was fit on every split.
    pub lasso_paths: usize,
}

/// `n` points spaced geometrically from `lo` to `hi`.
pub fn geometric_grid<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * lit::<T>(i) / lit::<T>(n - 1)).exp())
        .collect()
}

/// Geometric grid from `1e-3` to `1` with 12 points.
pub fn default_grid<T: Scalar>() -> Vec<T> {
    geometric_grid(T::lit(1e-3), T::one(), 12)
}

struct Split<T: Scalar> {
    solver: LassoSolver<T>,
    test: RegressionProblem<T>,
}

struct CvState<'a, T: Scalar> {
    splits: Vec<Split<T>>,
    fits: HashMap<u64, Vec<DVector<T>>>,
    s: usize,
    config: &'a CvConfig,
}

impl<T: Scalar> CvState<'_, T> {
    fn fits_for(&mut self, lambda_init: T) -> Result<&Vec<DVector<T>>> {
        let key = lambda_init.as_f64().to_bits();
        if !self.fits.contains_key(&key) {
            let fits = self
                .splits
                .par_iter()
                .map(|sp| {
                    sp.solver
                        .solve(lambda_init, T::lit(LASSO_TOL), LASSO_MAX_ITERS, None)
                        .map(|f| f.coefficients)
                })
                .collect::<Result<Vec<_>>>()?;
            self.fits.insert(key, fits);
        }
        Ok(&self.fits[&key])
    }

    /// Average over splits of held-out MSE plus the support-size penalties.
    fn loss(&mut self, lambda_init: T, lambda_thres: T) -> Result<T> {
        let (s, c1, c2) = (self.s, T::lit(self.config.c1), T::lit(self.config.c2));
        self.fits_for(lambda_init)?;
        let fits = &self.fits[&lambda_init.as_f64().to_bits()];
        let mut total = T::zero();
        for (sp, fit) in self.splits.iter().zip(fits) {
            let est = threshold(fit, lambda_thres)?;
            let resid = sp.test.responses() - sp.test.design() * &est.coefficients;
            let mut loss = resid.norm_squared() / lit::<T>(sp.test.n());
            let nnz = est.support.len();
            if nnz < s {
                loss += c1;
            } else if nnz > s {
                loss += c2 * lit::<T>(nnz);
            }
            total += loss;
        }
        Ok(total / lit::<T>(self.splits.len()))
    }
}

/// Grid of the same size centered (geometrically) on `center` with half the
/// log-span of `grid`. Odd sizes keep `center` itself on the grid.
fn narrow<T: Scalar>(grid: &[T], center: T) -> Vec<T> {
    if grid.len() <= 1 {
        return vec![center];
    }
    let (lo, hi) = grid
        .iter()
        .fold((T::max_value().unwrap(), T::zero()), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let half_span = (hi / lo).ln() / T::lit(4.0);
    let n = if grid.len() % 2 == 1 { grid.len() } else { grid.len() + 1 };
    geometric_grid(center * (-half_span).exp(), center * half_span.exp(), n)
}

fn scan<T: Scalar>(grid: &[T], mut eval: impl FnMut(T) -> Result<T>, best: (T, T)) -> Result<(T, T)> {
    let mut best = best;
    for &v in grid {
        let l = eval(v)?;
        if l < best.1 {
            best = (v, l);
        }
    }
    Ok(best)
}

/// Chooses `(lambda_init, lambda_thres)` by coordinate search on the
/// cross-validated loss
/// `MSE_test + c1 freq(||theta||_0 < s) + c2 mean(1{||theta||_0 > s} ||theta||_0)`.
///
/// Samples are split into `folds` blocks `mc_repeats` times with independent
/// shuffles. The initial grids are searched jointly; each narrowing round then
/// shrinks both grids geometrically around the incumbents and scans
/// `lambda_thres` at the incumbent `lambda_init`, then `lambda_init` at the
/// incumbent `lambda_thres`.
pub fn cv_tune<T: Scalar, R: Rng + ?Sized>(
    problem: &RegressionProblem<T>,
    init_grid: &[T],
    thres_grid: &[T],
    s: usize,
    config: &CvConfig,
    rng: &mut R,
) -> Result<CvSelection<T>> {
    if init_grid.is_empty() || thres_grid.is_empty() {
        return Err(invalid("grid", "penalty grids must be nonempty"));
    }
    if init_grid.iter().chain(thres_grid).any(|v| !(*v > T::zero() && v.is_finite())) {
        return Err(invalid("grid", "penalties must be positive and finite"));
    }
    if config.folds < 2 {
        return Err(invalid("folds", "need at least two folds"));
    }
    if config.mc_repeats == 0 {
        return Err(invalid("mc_repeats", "need at least one repeat"));
    }
    let n = problem.n();
    if n < config.folds {
        return Err(Error::CrossValidation(format!(
            "{n} samples cannot fill {} folds without an empty fold",
            config.folds
        )));
    }

    let seeds: Vec<u64> = (0..config.mc_repeats).map(|_| rng.random()).collect();
    let mut splits = Vec::with_capacity(config.folds * config.mc_repeats);
    for seed in seeds {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for f in 0..config.folds {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| i % config.folds == f);
            let pick = |idx: Vec<usize>| idx.into_iter().map(|i| order[i]).collect::<Vec<_>>();
            splits.push(Split {
                solver: LassoSolver::new(&problem.select_rows(&pick(train))?),
                test: problem.select_rows(&pick(test))?,
            });
        }
    }

    let mut state = CvState {
        splits,
        fits: HashMap::new(),
        s,
        config,
    };
    let mut init: Vec<T> = init_grid.to_vec();
    let mut thres: Vec<T> = thres_grid.to_vec();
    // Thresholding reuses the cached fits, so the first round can afford the
    // full product grid; coordinate scans start from its minimizer.
    let (mut li, mut lt) = (init[0], thres[0]);
    let mut loss = state.loss(li, lt)?;
    for &a in &init {
        for &b in &thres {
            let l = state.loss(a, b)?;
            if l < loss {
                (li, lt, loss) = (a, b, l);
            }
        }
    }
    for _ in 0..config.narrowing_rounds {
        init = narrow(&init, li);
        thres = narrow(&thres, lt);
        (lt, loss) = scan(&thres, |v| state.loss(li, v), (lt, loss))?;
        (li, loss) = scan(&init, |v| state.loss(v, lt), (li, loss))?;
    }
    Ok(CvSelection {
        lambda_init: li,
        lambda_thres: lt,
        loss,
        lasso_paths: state.fits.len(),
    })
}
