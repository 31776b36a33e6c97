use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, Stream, StreamError};

/// Per-class keep fractions `λ_y`. Classes without an entry are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    #[serde(with = "label_keys")]
    pub keep: BTreeMap<Label, f64>,
}

// Labels are written as string map keys so the spec also reads back when
// nested inside tagged enums.
mod label_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Label;

    pub fn serialize<S: Serializer>(keep: &BTreeMap<Label, f64>, s: S) -> Result<S::Ok, S::Error> {
        let named: BTreeMap<String, f64> = keep.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        named.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Label, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<Label>()
                    .map(|y| (y, v))
                    .map_err(|_| D::Error::custom(format!("bad class label {k:?}")))
            })
            .collect()
    }
}

impl SubsampleSpec {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            keep: [(0, lambda), (1, lambda)].into(),
        }
    }

    /// Sub-samples negatives only.
    pub fn negatives(lambda: f64) -> Self {
        Self {
            keep: [(0, lambda), (1, 1.0)].into(),
        }
    }

    pub fn keep_fraction(&self, label: Label) -> f64 {
        self.keep.get(&label).copied().unwrap_or(1.0)
    }

    pub fn is_identity(&self) -> bool {
        self.keep.values().all(|l| *l == 1.0)
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        match self.keep.iter().find(|(_, l)| !(0.0..=1.0).contains(*l)) {
            Some((y, l)) => Err(StreamError::InvalidSubsample(format!(
                "keep fraction {l} for class {y} outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }
}

/// Keeps each example of class `y` independently with probability `λ_y`.
/// Order and step indices are preserved.
pub fn apply_subsample(stream: &Stream, spec: &SubsampleSpec, seed: u64) -> Result<Stream, StreamError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = stream
        .examples()
        .iter()
        .filter(|e| {
            let u: f64 = rng.random();
            u < spec.keep_fraction(e.label)
        })
        .cloned()
        .collect();
    Stream::new(stream.horizon(), stream.dim(), kept)
}

/// Expected relative cost `(1/T) Σ_y count(y) · λ_y`.
pub fn subsample_cost(counts: &BTreeMap<Label, u64>, spec: &SubsampleSpec) -> Result<f64, StreamError> {
    spec.validate()?;
    if let Some(y) = spec.keep.keys().find(|y| !counts.contains_key(*y)) {
        return Err(StreamError::MissingClass(*y));
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let kept: f64 = counts
        .iter()
        .map(|(y, n)| *n as f64 * spec.keep_fraction(*y))
        .sum();
    Ok(kept / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::tests::two_cluster_spec;
    use crate::stream::generate;

    #[test]
    fn keep_all_and_none() {
        let s = generate(&two_cluster_spec(3000, 1)).unwrap();
        assert_eq!(apply_subsample(&s, &SubsampleSpec::uniform(1.0), 9).unwrap(), s);
        assert!(apply_subsample(&s, &SubsampleSpec::uniform(0.0), 9).unwrap().is_empty());
    }

    #[test]
    fn uniform_half_concentrates() {
        let s = generate(&two_cluster_spec(100_000, 4)).unwrap();
        let kept = apply_subsample(&s, &SubsampleSpec::uniform(0.5), 17).unwrap();
        let frac = kept.len() as f64 / s.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn subset_preserves_order_and_steps() {
        let s = generate(&two_cluster_spec(5000, 8)).unwrap();
        let kept = apply_subsample(&s, &SubsampleSpec::negatives(0.3), 2).unwrap();
        let mut it = s.examples().iter();
        for e in kept.examples() {
            assert!(it.any(|o| o == e), "example at step {} fabricated or reordered", e.step);
        }
        assert_eq!(kept.class_counts()[&1], s.class_counts()[&1]);
    }

    #[test]
    fn cost_examples() {
        let counts: BTreeMap<Label, u64> = [(0, 900), (1, 100)].into();
        assert_eq!(subsample_cost(&counts, &SubsampleSpec::uniform(0.5)).unwrap(), 0.5);
        assert!((subsample_cost(&counts, &SubsampleSpec::negatives(0.5)).unwrap() - 0.55).abs() < 1e-15);
        assert_eq!(subsample_cost(&counts, &SubsampleSpec::uniform(1.0)).unwrap(), 1.0);
        let partial: BTreeMap<Label, u64> = [(0, 10)].into();
        assert_eq!(
            subsample_cost(&partial, &SubsampleSpec::negatives(0.5)),
            Err(StreamError::MissingClass(1))
        );
        assert!(SubsampleSpec::uniform(1.5).validate().is_err());
    }

    #[test]
    fn cost_matches_kept_fraction_over_seeds() {
        let s = generate(&two_cluster_spec(4000, 12)).unwrap();
        let spec = SubsampleSpec::negatives(0.4);
        let expected = subsample_cost(&s.class_counts(), &spec).unwrap();
        let fracs: Vec<f64> = (0..50)
            .map(|seed| apply_subsample(&s, &spec, seed).unwrap().len() as f64 / s.len() as f64)
            .collect();
        let mean = fracs.iter().sum::<f64>() / 50.0;
        let var = fracs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 49.0;
        let se = (var / 50.0).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "{mean} vs {expected} (se {se})");
    }
}
