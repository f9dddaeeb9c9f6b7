//! Bandit instances, their derived quantities, and reward simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A linear bandit: `K` arm vectors in `R^d` and a hidden sparse parameter.
///
/// Arms are stored as the rows of a `K x d` matrix. The declared sparsity
/// `s` and `theta_min` are the quantities an algorithm is allowed to know.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance<T: Scalar> {
    arms: DMatrix<T>,
    theta_star: DVector<T>,
    noise_sigma: T,
    sparsity: usize,
    theta_min: T,
    bounded_mean: bool,
}

impl<T: Scalar> BanditInstance<T> {
    /// Builds an exactly `s`-sparse instance.
    pub fn new(arms: DMatrix<T>, theta_star: DVector<T>, noise_sigma: T, s: usize) -> Result<Self> {
        let inst = Self::build(arms, theta_star, noise_sigma, s)?;
        let nnz = inst.support().len();
        if nnz != s {
            return Err(Error::InvalidInstance(format!(
                "theta_star has {nnz} nonzero coordinates but s = {s}"
            )));
        }
        Ok(inst)
    }

    /// Builds an instance whose parameter is only approximately `s`-sparse:
    /// the `s` largest-magnitude coordinates play the role of the support and
    /// `theta_min` is the smallest of them.
    pub fn new_approximately_sparse(
        arms: DMatrix<T>,
        theta_star: DVector<T>,
        noise_sigma: T,
        s: usize,
    ) -> Result<Self> {
        Self::build(arms, theta_star, noise_sigma, s)
    }

    fn build(arms: DMatrix<T>, theta_star: DVector<T>, noise_sigma: T, s: usize) -> Result<Self> {
        let (k, d) = arms.shape();
        if k < 1 {
            return Err(Error::InvalidInstance("no arms".into()));
        }
        if theta_star.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: theta_star.len(),
            });
        }
        if s == 0 || s > d {
            return Err(Error::InvalidInstance(format!("sparsity {s} outside 1..={d}")));
        }
        if noise_sigma < T::zero() || !noise_sigma.is_finite() {
            return Err(Error::InvalidInstance("noise_sigma must be finite and >= 0".into()));
        }
        if arms.iter().chain(theta_star.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance("non-finite entry".into()));
        }
        let mut mags: Vec<T> = theta_star.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let theta_min = mags[s - 1];
        if theta_min <= T::zero() {
            return Err(Error::InvalidInstance(format!(
                "theta_star has fewer than s = {s} nonzero coordinates"
            )));
        }
        Ok(Self {
            arms,
            theta_star,
            noise_sigma,
            sparsity: s,
            theta_min,
            bounded_mean: false,
        })
    }

    /// Marks the instance as satisfying `|mu_k| <= 1` for every arm, failing if it does not.
    pub fn with_bounded_mean(mut self) -> Result<Self> {
        let means = self.means();
        if let Some(k) = means.iter().position(|m| m.abs() > T::one()) {
            return Err(Error::InvalidInstance(format!("arm {k} has |mean| > 1")));
        }
        self.bounded_mean = true;
        Ok(self)
    }

    pub fn with_noise_sigma(mut self, noise_sigma: T) -> Result<Self> {
        if noise_sigma < T::zero() || !noise_sigma.is_finite() {
            return Err(Error::InvalidInstance("noise_sigma must be finite and >= 0".into()));
        }
        self.noise_sigma = noise_sigma;
        Ok(self)
    }

    pub fn arms(&self) -> &DMatrix<T> {
        &self.arms
    }

    pub fn arm(&self, k: usize) -> DVector<T> {
        self.arms.row(k).transpose()
    }

    pub fn theta_star(&self) -> &DVector<T> {
        &self.theta_star
    }

    pub fn noise_sigma(&self) -> T {
        self.noise_sigma
    }

    pub fn num_arms(&self) -> usize {
        self.arms.nrows()
    }

    pub fn dim(&self) -> usize {
        self.arms.ncols()
    }

    pub fn sparsity(&self) -> usize {
        self.sparsity
    }

    pub fn theta_min(&self) -> T {
        self.theta_min
    }

    pub fn is_bounded_mean(&self) -> bool {
        self.bounded_mean
    }

    /// Indices of the nonzero coordinates of `theta_star`.
    pub fn support(&self) -> Vec<usize> {
        self.theta_star
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(j, _)| j)
            .collect()
    }

    pub fn means(&self) -> DVector<T> {
        &self.arms * &self.theta_star
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            arms: self
                .arms
                .row_iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
            theta_star: self.theta_star.iter().map(|v| v.as_f64()).collect(),
            noise_sigma: self.noise_sigma.as_f64(),
            s: self.sparsity,
        }
    }

    /// Rebuilds an instance from its JSON record. Records whose parameter has
    /// more than `s` nonzero coordinates are accepted as approximately sparse.
    pub fn from_record(rec: &InstanceRecord) -> Result<Self> {
        let k = rec.arms.len();
        let d = rec.theta_star.len();
        if let Some(row) = rec.arms.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        let arms = DMatrix::from_fn(k, d, |i, j| T::lit(rec.arms[i][j]));
        let theta = DVector::from_iterator(d, rec.theta_star.iter().map(|v| T::lit(*v)));
        let nnz = rec.theta_star.iter().filter(|v| **v != 0.0).count();
        if nnz > rec.s {
            Self::new_approximately_sparse(arms, theta, T::lit(rec.noise_sigma), rec.s)
        } else {
            Self::new(arms, theta, T::lit(rec.noise_sigma), rec.s)
        }
    }
}

/// JSON wire form of a [`BanditInstance`]: `arms` is a row-major `K x d` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub arms: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    pub s: usize,
}

fn default_sigma() -> f64 {
    1.0
}

impl<T: Scalar> Serialize for BanditInstance<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(serializer)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for BanditInstance<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = InstanceRecord::deserialize(deserializer)?;
        Self::from_record(&rec).map_err(serde::de::Error::custom)
    }
}

/// Means, the unique best arm, and the sorted suboptimality gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSummary<T: Scalar> {
    pub means: DVector<T>,
    pub best_arm: usize,
    /// Gaps `mu_best - mu_k` of the other arms, nondecreasing. `gaps[0]` is the
    /// gap of the second-best arm (Delta_2 in the usual 1-based numbering).
    pub gaps: Vec<T>,
    /// Arm indices ordered by decreasing mean, ties by index.
    pub ranking: Vec<usize>,
}

pub fn summarize<T: Scalar>(instance: &BanditInstance<T>) -> Result<InstanceSummary<T>> {
    let means = instance.means();
    let mut ranking: Vec<usize> = (0..means.len()).collect();
    ranking.sort_by(|&a, &b| {
        means[b]
            .partial_cmp(&means[a])
            .expect("finite means")
            .then(a.cmp(&b))
    });
    let best_arm = ranking[0];
    if ranking.len() > 1 && means[ranking[1]] == means[best_arm] {
        return Err(Error::NonUniqueBestArm(best_arm, ranking[1]));
    }
    let gaps = ranking[1..]
        .iter()
        .map(|&k| means[best_arm] - means[k])
        .collect();
    Ok(InstanceSummary {
        means,
        best_arm,
        gaps,
        ranking,
    })
}

/// `H_{2,lin}(m) = max_{2 <= i <= m} i / Delta_i^2` over the sorted gaps.
pub fn hardness<T: Scalar>(summary: &InstanceSummary<T>, m: usize) -> Result<T> {
    let k = summary.gaps.len() + 1;
    if m < 2 || m > k {
        return Err(Error::InvalidParameter {
            name: "m",
            reason: format!("must lie in 2..={k}, got {m}"),
        });
    }
    let h = (2..=m)
        .map(|i| {
            let gap = summary.gaps[i - 2];
            T::from_usize_lossy(i) / (gap * gap)
        })
        .fold(T::zero(), |acc, v| if v > acc { v } else { acc });
    Ok(h)
}

/// Draws `y_t = <theta*, a(A_t)> + sigma * z_t` for each pull in order.
pub fn sample_rewards<T: Scalar, R: Rng + ?Sized>(
    instance: &BanditInstance<T>,
    pulls: &[usize],
    rng: &mut R,
) -> Result<Vec<T>> {
    let means = instance.means();
    pulls
        .iter()
        .map(|&k| {
            let mean = *means.get(k).ok_or(Error::ArmOutOfRange {
                index: k,
                arms: means.len(),
            })?;
            Ok(mean + instance.noise_sigma() * noise_draw::<T, R>(rng))
        })
        .collect()
}

fn noise_draw<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

/// Source of rewards seen by the identification algorithms.
pub trait Environment<T: Scalar> {
    fn num_arms(&self) -> usize;

    fn pull(&mut self, arm: usize) -> Result<T>;

    /// Total number of pulls served so far.
    fn pulls(&self) -> usize;

    fn pull_many(&mut self, arm: usize, times: usize) -> Result<Vec<T>> {
        (0..times).map(|_| self.pull(arm)).collect()
    }
}

/// Simulated environment backed by a known instance and an owned RNG stream.
#[derive(Debug)]
pub struct Simulator<'a, T: Scalar, R> {
    instance: &'a BanditInstance<T>,
    means: DVector<T>,
    rng: R,
    pulls: usize,
}

impl<'a, T: Scalar, R: Rng> Simulator<'a, T, R> {
    pub fn new(instance: &'a BanditInstance<T>, rng: R) -> Self {
        Self {
            means: instance.means(),
            instance,
            rng,
            pulls: 0,
        }
    }

    pub fn instance(&self) -> &BanditInstance<T> {
        self.instance
    }

    pub fn into_rng(self) -> R {
        self.rng
    }
}

impl<T: Scalar, R: Rng> Environment<T> for Simulator<'_, T, R> {
    fn num_arms(&self) -> usize {
        self.means.len()
    }

    fn pull(&mut self, arm: usize) -> Result<T> {
        let mean = *self.means.get(arm).ok_or(Error::ArmOutOfRange {
            index: arm,
            arms: self.means.len(),
        })?;
        self.pulls += 1;
        Ok(mean + self.instance.noise_sigma() * noise_draw::<T, R>(&mut self.rng))
    }

    fn pulls(&self) -> usize {
        self.pulls
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_arm() -> BanditInstance<f64> {
        BanditInstance::new(dmatrix![1.0, 0.0; 0.0, 1.0], dvector![1.0, 0.0], 0.0, 1).unwrap()
    }

    #[test]
    fn orthonormal_summary() {
        let s = summarize(&two_arm()).unwrap();
        assert_eq!(s.means, dvector![1.0, 0.0]);
        assert_eq!(s.best_arm, 0);
        assert_eq!(s.gaps, vec![1.0]);
    }

    #[test]
    fn zero_parameter_is_rejected_or_tied() {
        // theta = 0 cannot be s-sparse for s >= 1
        let err = BanditInstance::new(dmatrix![1.0, 0.0; 0.0, 1.0], dvector![0.0, 0.0], 1.0, 1);
        assert!(err.is_err());
        // equal means through the summary path
        let inst =
            BanditInstance::new(dmatrix![0.0, 1.0; 0.0, -1.0], dvector![1.0, 0.0], 1.0, 1).unwrap();
        assert!(matches!(summarize(&inst), Err(Error::NonUniqueBestArm(0, 1))));
    }

    #[test]
    fn hardness_examples() {
        let s = InstanceSummary {
            means: dvector![0.0],
            best_arm: 0,
            gaps: vec![0.5, 0.5, 1.0],
            ranking: vec![],
        };
        assert_eq!(hardness(&s, 4).unwrap(), 12.0);
        assert_eq!(hardness(&s, 2).unwrap(), 8.0);
        assert!(hardness(&s, 1).is_err());
        assert!(hardness(&s, 5).is_err());
        let single = InstanceSummary {
            gaps: vec![1.0],
            ..s
        };
        assert_eq!(hardness(&single, 2).unwrap(), 2.0);
    }

    #[test]
    fn noiseless_rewards_are_means() {
        let inst = two_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = sample_rewards(&inst, &[0, 0, 1], &mut rng).unwrap();
        assert_eq!(y, vec![1.0, 1.0, 0.0]);
        assert!(matches!(
            sample_rewards(&inst, &[2], &mut rng),
            Err(Error::ArmOutOfRange { index: 2, arms: 2 })
        ));
    }

    #[test]
    fn same_seed_same_rewards() {
        let inst = two_arm().with_noise_sigma(1.0).unwrap();
        let pulls = vec![0, 1, 0, 1, 1];
        let a = sample_rewards(&inst, &pulls, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_rewards(&inst, &pulls, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_concentrates() {
        let inst = two_arm().with_noise_sigma(1.0).unwrap();
        let pulls = vec![0; 100_000];
        let y = sample_rewards(&inst, &pulls, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn simulator_matches_sample_rewards() {
        let inst = two_arm().with_noise_sigma(0.5).unwrap();
        let pulls = [1, 0, 0, 1];
        let expected = sample_rewards(&inst, &pulls, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut sim = Simulator::new(&inst, ChaCha8Rng::seed_from_u64(4));
        let got: Vec<f64> = pulls.iter().map(|&k| sim.pull(k).unwrap()).collect();
        assert_eq!(got, expected);
        assert_eq!(sim.pulls(), 4);
    }

    #[test]
    fn json_round_trip_and_schema() {
        let inst = two_arm();
        let json = serde_json::to_value(&inst).unwrap();
        assert_eq!(json["arms"], serde_json::json!([[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(json["s"], 1);
        let back: BanditInstance<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn approximately_sparse_theta_min() {
        let arms = DMatrix::<f64>::identity(3, 3);
        let inst =
            BanditInstance::new_approximately_sparse(arms.clone(), dvector![1.0, -0.01, 2.0], 1.0, 2)
                .unwrap();
        assert_eq!(inst.theta_min(), 1.0);
        assert!(BanditInstance::new(arms, dvector![1.0, -0.01, 2.0], 1.0, 2).is_err());
    }

    #[test]
    fn bounded_mean_flag() {
        assert!(two_arm().with_bounded_mean().unwrap().is_bounded_mean());
        let big = BanditInstance::new(dmatrix![2.0, 0.0], dvector![1.0, 0.0], 1.0, 1).unwrap();
        assert!(big.with_bounded_mean().is_err());
    }
}
