//! Deterministic generator of non-stationary labeled example streams.
//!
//! A stream is a mixture of feature clusters whose proportions drift along
//! piecewise-linear trajectories. Labels follow a per-cluster logistic model
//! blended with a time-varying noise level that is shared by every example,
//! so all learners see the same "hard" and "easy" periods.

mod io;
mod kmeans;
mod subsample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::SliceId;

pub use io::{read_slices, read_stream, write_slices, write_stream};
pub use kmeans::{kmeans_slices, SliceAssignment};
pub use subsample::{apply_subsample, subsample_cost, SubsampleSpec};

/// Class label; the simulator emits 0 (negative) and 1 (positive).
pub type Label = u8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error("invalid sub-sampling spec: {0}")]
    InvalidSubsample(String),
    #[error("class {0} has no count")]
    MissingClass(Label),
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("stream file: {0}")]
    Format(String),
}

/// Feature distribution and label coefficients of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub center: Vec<f64>,
    pub spread: f64,
    pub coef: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

/// Mixture weights at a position `at` in `[0, 1]` of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePoint {
    pub at: f64,
    pub weights: Vec<f64>,
}

/// Shared label-noise level at a position `at` in `[0, 1]` of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub at: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub horizon: u64,
    pub clusters: Vec<ClusterSpec>,
    pub mixture: Vec<MixturePoint>,
    #[serde(default)]
    pub difficulty: Vec<LevelPoint>,
    pub positive_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub step: u64,
    pub features: Vec<f64>,
    pub label: Label,
    pub true_cluster: SliceId,
}

impl AsRef<[f64]> for Example {
    fn as_ref(&self) -> &[f64] {
        &self.features
    }
}

/// Time-ordered examples. After sub-sampling, steps keep their original values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    horizon: u64,
    dim: usize,
    examples: Vec<Example>,
}

impl Stream {
    pub fn new(horizon: u64, dim: usize, examples: Vec<Example>) -> Result<Self, StreamError> {
        let mut prev = 0;
        for e in &examples {
            if e.step < prev || e.step == 0 || e.step > horizon {
                return Err(StreamError::InvalidSpec(format!(
                    "example step {} out of order or outside [1, {horizon}]",
                    e.step
                )));
            }
            if e.features.len() != dim {
                return Err(StreamError::InvalidSpec(format!(
                    "example at step {} has {} features, expected {dim}",
                    e.step,
                    e.features.len()
                )));
            }
            prev = e.step;
        }
        Ok(Self {
            horizon,
            dim,
            examples,
        })
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples with `step > after`.
    pub fn suffix_after(&self, after: u64) -> &[Example] {
        let i = self.examples.partition_point(|e| e.step <= after);
        &self.examples[i..]
    }

    /// Number of examples with step in `[start, end]`.
    pub fn count_between(&self, start: u64, end: u64) -> u64 {
        let lo = self.examples.partition_point(|e| e.step < start);
        let hi = self.examples.partition_point(|e| e.step <= end);
        hi.saturating_sub(lo) as u64
    }

    /// Counts per class; both simulator classes are always present.
    pub fn class_counts(&self) -> std::collections::BTreeMap<Label, u64> {
        let mut counts: std::collections::BTreeMap<Label, u64> = [(0, 0), (1, 0)].into();
        for e in &self.examples {
            *counts.entry(e.label).or_default() += 1;
        }
        counts
    }

    /// Ground-truth cluster of every example, indexed like `examples()`.
    pub fn true_clusters(&self) -> Vec<SliceId> {
        self.examples.iter().map(|e| e.true_cluster).collect()
    }
}

fn interpolate<T>(points: &[T], u: f64, at: impl Fn(&T) -> f64, out: &mut dyn FnMut(&T, &T, f64)) {
    let first = &points[0];
    let last = &points[points.len() - 1];
    if u <= at(first) {
        return out(first, first, 0.0);
    }
    if u >= at(last) {
        return out(last, last, 0.0);
    }
    let i = points.partition_point(|p| at(p) <= u);
    let (a, b) = (&points[i - 1], &points[i]);
    let frac = (u - at(a)) / (at(b) - at(a));
    out(a, b, frac)
}

impl StreamSpec {
    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.center.len())
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let bad = |m: String| Err(StreamError::InvalidSpec(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.clusters.is_empty() {
            return bad("at least one cluster is required".into());
        }
        let dim = self.dim();
        if dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.center.len() != dim || c.coef.len() != dim {
                return bad(format!("cluster {i} has inconsistent dimension"));
            }
            if !(c.spread >= 0.0) || !c.spread.is_finite() {
                return bad(format!("cluster {i} spread must be finite and non-negative"));
            }
        }
        if self.mixture.is_empty() {
            return bad("mixture needs at least one control point".into());
        }
        check_positions(self.mixture.iter().map(|p| p.at), "mixture")?;
        for p in &self.mixture {
            if p.weights.len() != self.clusters.len() {
                return bad(format!("mixture point at {} has wrong weight count", p.at));
            }
            if p.weights.iter().any(|w| !(*w >= 0.0)) {
                return bad(format!("mixture point at {} has a negative weight", p.at));
            }
            let sum: f64 = p.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("mixture weights at {} sum to {sum}", p.at));
            }
        }
        check_positions(self.difficulty.iter().map(|p| p.at), "difficulty")?;
        if self.difficulty.iter().any(|p| !(0.0..1.0).contains(&p.level)) {
            return bad("difficulty levels must lie in [0, 1)".into());
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Position of step `t` in `[0, 1]`.
    pub fn position(&self, step: u64) -> f64 {
        if self.horizon <= 1 {
            0.0
        } else {
            (step - 1) as f64 / (self.horizon - 1) as f64
        }
    }

    /// Interpolated mixture weights at position `u`.
    pub fn mixture_at(&self, u: f64, out: &mut Vec<f64>) {
        out.clear();
        interpolate(&self.mixture, u, |p| p.at, &mut |a, b, f| {
            out.extend(a.weights.iter().zip(&b.weights).map(|(x, y)| x + f * (y - x)));
        });
    }

    /// Shared noise level at position `u` (zero without control points).
    pub fn difficulty_at(&self, u: f64) -> f64 {
        if self.difficulty.is_empty() {
            return 0.0;
        }
        let mut level = 0.0;
        interpolate(&self.difficulty, u, |p| p.at, &mut |a, b, f| {
            level = a.level + f * (b.level - a.level);
        });
        level
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng, u: f64, weights: &mut Vec<f64>) -> (usize, Vec<f64>) {
        self.mixture_at(u, weights);
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut cluster = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                cluster = i;
                break;
            }
        }
        // Skip zero-weight tail clusters reached only through rounding.
        while weights[cluster] == 0.0 && cluster > 0 {
            cluster -= 1;
        }
        let c = &self.clusters[cluster];
        let features = c
            .center
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + c.spread * z
            })
            .collect();
        (cluster, features)
    }

    fn logit(&self, cluster: usize, x: &[f64]) -> f64 {
        let c = &self.clusters[cluster];
        c.bias + c.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Global logit offset making the mean clean positive probability match
    /// `positive_rate` on a pilot sample spread evenly over the horizon.
    pub fn calibrated_intercept(&self) -> f64 {
        const PILOT: usize = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let mut weights = Vec::new();
        let logits: Vec<f64> = (0..PILOT)
            .map(|i| {
                let u = (i as f64 + 0.5) / PILOT as f64;
                let (c, x) = self.sample_point(&mut rng, u, &mut weights);
                self.logit(c, &x)
            })
            .collect();
        let mean_rate = |b: f64| logits.iter().map(|z| sigmoid(z + b)).sum::<f64>() / PILOT as f64;
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_rate(mid) < self.positive_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn check_positions(at: impl Iterator<Item = f64>, what: &str) -> Result<(), StreamError> {
    let mut prev = f64::NEG_INFINITY;
    for a in at {
        if !(0.0..=1.0).contains(&a) || a <= prev {
            return Err(StreamError::InvalidSpec(format!(
                "{what} positions must be strictly increasing within [0, 1]"
            )));
        }
        prev = a;
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Generates `horizon` examples, one per step. Output is a pure function of
/// the spec (including its seed).
pub fn generate(spec: &StreamSpec) -> Result<Stream, StreamError> {
    spec.validate()?;
    let intercept = spec.calibrated_intercept();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut weights = Vec::with_capacity(spec.clusters.len());
    let mut examples = Vec::with_capacity(spec.horizon as usize);
    for step in 1..=spec.horizon {
        let u = spec.position(step);
        let (cluster, features) = spec.sample_point(&mut rng, u, &mut weights);
        let clean = sigmoid(spec.logit(cluster, &features) + intercept);
        let noise = spec.difficulty_at(u);
        let p = (1.0 - noise) * clean + noise * spec.positive_rate;
        let draw: f64 = rng.random();
        examples.push(Example {
            step,
            features,
            label: u8::from(draw < p),
            true_cluster: cluster as SliceId,
        });
    }
    Stream::new(spec.horizon, spec.dim(), examples)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn two_cluster_spec(horizon: u64, seed: u64) -> StreamSpec {
        StreamSpec {
            horizon,
            clusters: vec![
                ClusterSpec {
                    center: vec![1.0, 0.0],
                    spread: 0.5,
                    coef: vec![1.0, -1.0],
                    bias: 0.0,
                },
                ClusterSpec {
                    center: vec![-1.0, 0.5],
                    spread: 0.5,
                    coef: vec![-0.5, 2.0],
                    bias: 0.3,
                },
            ],
            mixture: vec![
                MixturePoint {
                    at: 0.0,
                    weights: vec![1.0, 0.0],
                },
                MixturePoint {
                    at: 1.0,
                    weights: vec![0.0, 1.0],
                },
            ],
            difficulty: vec![
                LevelPoint { at: 0.0, level: 0.0 },
                LevelPoint { at: 0.5, level: 0.4 },
                LevelPoint { at: 1.0, level: 0.1 },
            ],
            positive_rate: 0.2,
            seed,
        }
    }

    #[test]
    fn single_cluster_degenerate_mixture() {
        let mut spec = two_cluster_spec(500, 3);
        spec.clusters.truncate(1);
        spec.mixture = vec![MixturePoint {
            at: 0.0,
            weights: vec![1.0],
        }];
        let s = generate(&spec).unwrap();
        assert_eq!(s.len(), 500);
        assert!(s.examples().iter().all(|e| e.true_cluster == 0));
    }

    #[test]
    fn swapping_mixture_drifts() {
        let s = generate(&two_cluster_spec(10_000, 11)).unwrap();
        let share = |lo: usize, hi: usize| {
            s.examples()[lo..hi].iter().filter(|e| e.true_cluster == 0).count() as f64
                / (hi - lo) as f64
        };
        assert!(share(0, 1000) > 0.9);
        assert!(share(9000, 10_000) < 0.1);
        for (i, e) in s.examples().iter().enumerate() {
            assert_eq!(e.step, i as u64 + 1);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate(&two_cluster_spec(2000, 5)).unwrap();
        let b = generate(&two_cluster_spec(2000, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&two_cluster_spec(2000, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn positive_rate_is_calibrated() {
        let mut spec = two_cluster_spec(40_000, 2);
        spec.difficulty.clear();
        let s = generate(&spec).unwrap();
        let rate = s.class_counts()[&1] as f64 / s.len() as f64;
        assert!((rate - 0.2).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn mixture_weights_converge_over_seeds() {
        let mut spec = two_cluster_spec(2001, 0);
        spec.clusters.push(spec.clusters[0].clone());
        spec.mixture = vec![
            MixturePoint { at: 0.0, weights: vec![0.6, 0.1, 0.3] },
            MixturePoint { at: 0.5, weights: vec![0.2, 0.5, 0.3] },
            MixturePoint { at: 1.0, weights: vec![0.1, 0.1, 0.8] },
        ];
        let half = 50u64;
        let mut counts = vec![vec![0.0; 3]; spec.mixture.len()];
        let mut expected = vec![vec![0.0; 3]; spec.mixture.len()];
        let mut w = Vec::new();
        for seed in 0..100 {
            spec.seed = seed;
            let s = generate(&spec).unwrap();
            for (k, cp) in spec.mixture.iter().enumerate() {
                let center = 1 + (cp.at * 2000.0).round() as u64;
                let lo = center.saturating_sub(half).max(1);
                let hi = (center + half).min(2001);
                for e in &s.examples()[(lo - 1) as usize..hi as usize] {
                    counts[k][e.true_cluster as usize] += 1.0;
                    if seed == 0 {
                        spec.mixture_at(spec.position(e.step), &mut w);
                        for (x, y) in expected[k].iter_mut().zip(&w) {
                            *x += y;
                        }
                    }
                }
            }
        }
        for k in 0..spec.mixture.len() {
            let total: f64 = counts[k].iter().sum();
            let n: f64 = expected[k].iter().sum();
            for c in 0..3 {
                let emp = counts[k][c] / total;
                let exp = expected[k][c] / n;
                assert!((emp - exp).abs() < 0.02, "point {k} cluster {c}: {emp} vs {exp}");
                assert!((exp - spec.mixture[k].weights[c]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = two_cluster_spec(100, 0);
        spec.mixture[0].weights = vec![0.7, 0.7];
        assert!(matches!(generate(&spec), Err(StreamError::InvalidSpec(_))));
        let mut spec = two_cluster_spec(100, 0);
        spec.clusters[1].coef.push(1.0);
        assert!(generate(&spec).is_err());
        let mut spec = two_cluster_spec(100, 0);
        spec.positive_rate = 1.0;
        assert!(generate(&spec).is_err());
    }
}
