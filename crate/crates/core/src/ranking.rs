//! Ranking-quality metrics: pairwise error rate, regret, regret@k and
//! reference-normalized regret@k.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ConfigId, Ranking};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("ranking is not a permutation of the ground-truth configurations")]
    NotAPermutation,
    #[error("need at least two configurations, got {0}")]
    TooFewConfigs(usize),
    #[error("k = {k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("reference mean must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("metric for config {0} is NaN")]
    InvalidMetric(ConfigId),
}

/// Per-configuration final-window metrics and the ranking `r*` they induce
/// (ascending metric, ties by ascending id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    metrics: BTreeMap<ConfigId, f64>,
    ranking: Ranking,
}

impl GroundTruth {
    pub fn from_metrics(metrics: BTreeMap<ConfigId, f64>) -> Result<Self, RankingError> {
        if let Some((id, _)) = metrics.iter().find(|(_, m)| m.is_nan()) {
            return Err(RankingError::InvalidMetric(*id));
        }
        let ranking = rank_by(&metrics);
        Ok(Self { metrics, ranking })
    }

    pub fn metrics(&self) -> &BTreeMap<ConfigId, f64> {
        &self.metrics
    }

    pub fn metric(&self, id: ConfigId) -> Option<f64> {
        self.metrics.get(&id).copied()
    }

    pub fn ranking(&self) -> &Ranking {
        &self.ranking
    }

    pub fn len(&self) -> usize {
        self.metrics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty()
    }

    fn check(&self, r: &Ranking) -> Result<Vec<f64>, RankingError> {
        if !r.is_permutation_of(self.metrics.keys()) {
            return Err(RankingError::NotAPermutation);
        }
        Ok(r.order().iter().map(|id| self.metrics[id]).collect())
    }

    fn sorted(&self) -> Vec<f64> {
        self.ranking.order().iter().map(|id| self.metrics[id]).collect()
    }
}

/// Orders configurations by ascending score, ties broken by ascending id.
pub fn rank_by(scores: &BTreeMap<ConfigId, f64>) -> Ranking {
    let mut order: Vec<(ConfigId, f64)> = scores.iter().map(|(k, v)| (*k, *v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ranking::new(order.into_iter().map(|(id, _)| id).collect())
        .expect("map keys are unique")
}

// Positive part of `a - b`; equal values (including two infinities) cost nothing.
fn excess(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).max(0.0)
    }
}

/// Fraction of position pairs `i < j` with `m̄(r(i)) > m̄(r(j))`.
pub fn pairwise_error_rate(r: &Ranking, truth: &GroundTruth) -> Result<f64, RankingError> {
    let n = truth.len();
    if n < 2 {
        return Err(RankingError::TooFewConfigs(n));
    }
    let m = truth.check(r)?;
    let mut errors = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if m[i] > m[j] {
                errors += 1;
            }
        }
    }
    Ok(errors as f64 / (n * (n - 1) / 2) as f64)
}

/// Mean positive excess of `r` over `r*`, position by position, over the full
/// ranking.
pub fn regret(r: &Ranking, truth: &GroundTruth) -> Result<f64, RankingError> {
    regret_at_k(r, truth, truth.len())
}

/// Mean positive excess over the first `k` positions.
pub fn regret_at_k(r: &Ranking, truth: &GroundTruth, k: usize) -> Result<f64, RankingError> {
    let n = truth.len();
    if k == 0 || k > n {
        return Err(RankingError::KOutOfRange { k, n });
    }
    let m = truth.check(r)?;
    let best = truth.sorted();
    let total: f64 = m.iter().zip(&best).take(k).map(|(a, b)| excess(*a, *b)).sum();
    Ok(total / k as f64)
}

/// regret@k as a percentage of a reference configuration's final metric.
pub fn normalized_regret_at_k(
    r: &Ranking,
    truth: &GroundTruth,
    k: usize,
    reference_mean: f64,
) -> Result<f64, RankingError> {
    let raw = regret_at_k(r, truth, k)?;
    normalize_regret(raw, reference_mean)
}

pub fn normalize_regret(regret: f64, reference_mean: f64) -> Result<f64, RankingError> {
    if reference_mean.is_nan() || reference_mean <= 0.0 {
        return Err(RankingError::NonPositiveReference(reference_mean));
    }
    Ok(100.0 * regret / reference_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth(values: &[f64]) -> GroundTruth {
        GroundTruth::from_metrics(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| (ConfigId(i as u32), *v))
                .collect(),
        )
        .unwrap()
    }

    fn ranking(ids: &[u32]) -> Ranking {
        Ranking::new(ids.iter().map(|i| ConfigId(*i)).collect()).unwrap()
    }

    #[test]
    fn truth_ties_broken_by_id() {
        let t = truth(&[0.3, 0.1, 0.3, 0.1]);
        assert_eq!(t.ranking(), &ranking(&[1, 3, 0, 2]));
    }

    #[test]
    fn per_examples() {
        let t = truth(&[0.1, 0.2, 0.3]);
        assert_eq!(pairwise_error_rate(t.ranking(), &t).unwrap(), 0.0);
        let per = pairwise_error_rate(&ranking(&[1, 0, 2]), &t).unwrap();
        assert!((per - 1.0 / 3.0).abs() < 1e-15);
        let t4 = truth(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(pairwise_error_rate(&ranking(&[3, 2, 1, 0]), &t4).unwrap(), 1.0);
    }

    #[test]
    fn per_errors() {
        let t = truth(&[0.1]);
        assert_eq!(
            pairwise_error_rate(&ranking(&[0]), &t),
            Err(RankingError::TooFewConfigs(1))
        );
        let t = truth(&[0.1, 0.2]);
        assert_eq!(
            pairwise_error_rate(&ranking(&[0, 5]), &t),
            Err(RankingError::NotAPermutation)
        );
        assert_eq!(regret(&ranking(&[0]), &t), Err(RankingError::NotAPermutation));
    }

    #[test]
    fn regret_examples() {
        let t = truth(&[0.1, 0.2]);
        assert!((regret(&ranking(&[1, 0]), &t).unwrap() - 0.05).abs() < 1e-15);
        let flat = truth(&[0.4, 0.4, 0.4]);
        assert_eq!(regret(&ranking(&[2, 0, 1]), &flat).unwrap(), 0.0);
    }

    #[test]
    fn regret_at_k_examples() {
        let t = truth(&[0.1, 0.2, 0.3]);
        let r = ranking(&[1, 0, 2]);
        assert!((regret_at_k(&r, &t, 1).unwrap() - 0.1).abs() < 1e-15);
        assert!((regret_at_k(&r, &t, 3).unwrap() - 0.1 / 3.0).abs() < 1e-15);
        assert_eq!(
            regret_at_k(&r, &t, 4),
            Err(RankingError::KOutOfRange { k: 4, n: 3 })
        );
        assert!(regret_at_k(&r, &t, 0).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_regret(0.0, 0.5).unwrap(), 0.0);
        assert!((normalize_regret(0.0005, 0.5).unwrap() - 0.1).abs() < 1e-12);
        assert!((normalize_regret(0.001, 0.5).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(
            normalize_regret(0.1, 0.0),
            Err(RankingError::NonPositiveReference(_))
        ));
    }

    #[test]
    fn infinite_metrics_do_not_poison_regret() {
        let t = truth(&[0.1, f64::INFINITY, f64::INFINITY]);
        assert_eq!(regret(&ranking(&[0, 2, 1]), &t).unwrap(), 0.0);
        assert_eq!(regret_at_k(&ranking(&[1, 0, 2]), &t, 1).unwrap(), f64::INFINITY);
    }

    fn shuffled(n: usize, keys: &[u64]) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.sort_by_key(|i| keys[*i as usize]);
        ids
    }

    proptest! {
        #[test]
        fn truth_ranking_is_perfect(values in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let t = truth(&values);
            prop_assert_eq!(pairwise_error_rate(t.ranking(), &t).unwrap(), 0.0);
            prop_assert_eq!(regret(t.ranking(), &t).unwrap(), 0.0);
        }

        #[test]
        fn invariances(
            values in proptest::collection::vec(0.0f64..1.0, 2..10),
            keys in proptest::collection::vec(any::<u64>(), 10),
            c in -1.0f64..1.0,
        ) {
            let n = values.len();
            let t = truth(&values);
            let r = ranking(&shuffled(n, &keys));
            // regret@|Ω| is regret.
            prop_assert_eq!(regret_at_k(&r, &t, n).unwrap(), regret(&r, &t).unwrap());
            // regret@1 is the excess of the chosen configuration over the best.
            let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = t.metric(r.order()[0]).unwrap();
            prop_assert!((regret_at_k(&r, &t, 1).unwrap() - (first - best).max(0.0)).abs() < 1e-15);
            // Shift invariance of regret; monotone invariance of PER.
            let shifted = truth(&values.iter().map(|v| v + c).collect::<Vec<_>>());
            for k in 1..=n {
                let a = regret_at_k(&r, &t, k).unwrap();
                let b = regret_at_k(&r, &shifted, k).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
            let cubed = truth(&values.iter().map(|v| (v * 3.0).exp()).collect::<Vec<_>>());
            prop_assert_eq!(pairwise_error_rate(&r, &t).unwrap(), pairwise_error_rate(&r, &cubed).unwrap());
        }
    }
}
