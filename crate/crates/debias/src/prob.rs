//! Probability-simplex arithmetic and the dataset types shared by every
//! other module.
//!
//! All probabilities flow through [`ProbVector`], which enforces the simplex
//! invariant on construction. Logarithms and divisions are always taken
//! after clamping at [`PROB_FLOOR`], so no code path can produce an infinity
//! from a zero probability.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to any probability before a logarithm or division.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the simplex sum when validating externally supplied vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Index of the largest entry, ties broken by the lowest index.
///
/// This is the single argmax rule used everywhere in the crate; harnesses
/// that reason about prediction flips rely on it being consistent.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The label set: classes are `0..k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    k: usize,
}

impl LabelSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Construction(format!(
                "label space needs at least 2 classes, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn size(&self) -> usize {
        self.k
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector {
    entries: Vec<f64>,
}

impl ProbVector {
    /// Validate an externally supplied vector: non-negative entries summing
    /// to one within [`SIMPLEX_TOL`].
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        for (i, &p) in entries.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Domain(format!(
                    "probability entry {i} is {p}, expected a finite non-negative value"
                )));
            }
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!(
                "probability vector sums to {sum}, expected 1 within {SIMPLEX_TOL:e}"
            )));
        }
        Ok(Self { entries })
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        Self {
            entries: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries[i]
    }

    /// Argmax with the lowest-index tie rule.
    pub fn argmax(&self) -> usize {
        argmax(&self.entries)
    }

    /// Entrywise natural log after clamping at [`PROB_FLOOR`].
    pub fn log_floored(&self) -> Vec<f64> {
        self.entries.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect()
    }

    /// Total variation distance, `0.5 * sum |p_i - q_i|`.
    pub fn total_variation(&self, other: &ProbVector) -> f64 {
        0.5 * self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }
}

/// Unconstrained real logits; entries must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector {
    entries: Vec<f64>,
}

impl LogitVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Domain("empty logit vector".into()));
        }
        for (i, &z) in entries.iter().enumerate() {
            if !z.is_finite() {
                return Err(Error::Domain(format!("logit entry {i} is {z}, expected finite")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.entries)
    }
}

/// Rescale a non-negative vector onto the simplex.
///
/// Fails if any entry is negative or non-finite, or if every entry is zero;
/// the error names the first offending index.
pub fn normalize(raw: &[f64]) -> Result<ProbVector> {
    if raw.is_empty() {
        return Err(Error::Domain("cannot normalize an empty vector".into()));
    }
    for (i, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Domain(format!("entry {i} is {v}, expected finite")));
        }
        if v < 0.0 {
            return Err(Error::Domain(format!(
                "entry {i} is negative ({v}); normalize needs non-negative input"
            )));
        }
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Domain(
            "all entries are zero; normalize needs at least one positive entry".into(),
        ));
    }
    Ok(ProbVector {
        entries: raw.iter().map(|&v| v / sum).collect(),
    })
}

/// Numerically stable softmax (max subtraction); preserves the argmax.
pub fn softmax(logits: &LogitVector) -> ProbVector {
    softmax_slice(logits.entries())
}

/// Softmax over a raw slice. The slice must contain only finite values;
/// [`LogitVector`] guarantees this, internal callers are trusted.
pub(crate) fn softmax_slice(z: &[f64]) -> ProbVector {
    debug_assert!(z.iter().all(|v| v.is_finite()));
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector {
        entries: exps.iter().map(|&e| e / sum).collect(),
    }
}

/// Cross-entropy `-ln p[target]`, with the probability clamped at
/// [`PROB_FLOOR`]. The flag reports whether clamping fired.
pub fn cross_entropy_flagged(target: usize, prediction: &ProbVector) -> (f64, bool) {
    let p = prediction.get(target);
    let floored = p < PROB_FLOOR;
    (-(p.max(PROB_FLOOR).ln()), floored)
}

/// Cross-entropy `-ln p[target]` with the floor applied silently.
pub fn cross_entropy(target: usize, prediction: &ProbVector) -> f64 {
    cross_entropy_flagged(target, prediction).0
}

/// One draw from a world: indices into the signal and bias value sets plus
/// the realized label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub signal_id: usize,
    pub bias_id: usize,
    pub label: usize,
}

/// Where a dataset came from; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub world_id: String,
}

/// An ordered, in-memory list of samples over one label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    label_space: LabelSpace,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, label_space: LabelSpace, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Construction("dataset must be non-empty".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= label_space.size() {
                return Err(Error::Construction(format!(
                    "sample {i} has label {} outside 0..{}",
                    s.label,
                    label_space.size()
                )));
            }
        }
        Ok(Self {
            samples,
            label_space,
            provenance,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Split off the trailing `fraction` of samples (calibration holdout).
    /// Both halves keep the provenance.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
            return Err(Error::Construction(format!(
                "holdout fraction must be in (0,1), got {fraction}"
            )));
        }
        let n_holdout = ((self.samples.len() as f64) * fraction).round() as usize;
        let n_holdout = n_holdout.clamp(1, self.samples.len() - 1);
        let split = self.samples.len() - n_holdout;
        let head = Dataset {
            samples: self.samples[..split].to_vec(),
            label_space: self.label_space,
            provenance: self.provenance.clone(),
        };
        let tail = Dataset {
            samples: self.samples[split..].to_vec(),
            label_space: self.label_space,
            provenance: self.provenance.clone(),
        };
        Ok((head, tail))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_symmetric_input() {
        let p = normalize(&[0.2, 0.2]).unwrap();
        assert_eq!(p.entries(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_already_normalized() {
        let p = normalize(&[0.3, 0.7]).unwrap();
        assert_relative_eq!(p.get(0), 0.3, max_relative = 1e-15);
        assert_relative_eq!(p.get(1), 0.7, max_relative = 1e-15);
    }

    #[test]
    fn normalize_divides_by_sum() {
        // oracle: direct division by the sum 0.38
        let p = normalize(&[0.24, 0.14]).unwrap();
        assert_relative_eq!(p.get(0), 0.24 / 0.38, epsilon = 1e-15);
        assert_relative_eq!(p.get(1), 0.14 / 0.38, epsilon = 1e-15);
        assert_relative_eq!(p.get(0), 0.631578947368421, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        let err = normalize(&[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let err = normalize(&[0.5, -0.1]).unwrap_err();
        assert!(err.to_string().contains("entry 1"));
        assert!(normalize(&[f64::NAN, 1.0]).is_err());
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let p = softmax(&LogitVector::new(vec![0.0, 0.0]).unwrap());
        assert_eq!(p.entries(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_two_zero() {
        let p = softmax(&LogitVector::new(vec![2.0, 0.0]).unwrap());
        // oracle: 1/(1+e^-2)
        assert_relative_eq!(p.get(0), 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-15);
        assert_relative_eq!(p.get(0), 0.880797077977882, epsilon = 1e-12);
        assert_relative_eq!(p.get(1), 0.119202922022118, epsilon = 1e-12);
    }

    #[test]
    fn softmax_constant_vector_is_uniform() {
        for c in [-1e6, -3.0, 0.0, 7.5, 1e6] {
            let p = softmax(&LogitVector::new(vec![c, c, c]).unwrap());
            for i in 0..3 {
                assert_relative_eq!(p.get(i), 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn logit_vector_rejects_non_finite() {
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(0, &p), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let p = ProbVector::uniform(2);
        assert_relative_eq!(cross_entropy(0, &p), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_point_one() {
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        // oracle: -ln 0.1
        assert_relative_eq!(cross_entropy(1, &p), -(0.1f64).ln(), epsilon = 1e-15);
        assert_relative_eq!(cross_entropy(1, &p), 2.302585092994046, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let (value, floored) = cross_entropy_flagged(1, &p);
        assert!(floored);
        assert!(value.is_finite());
        assert_relative_eq!(value, -PROB_FLOOR.ln(), epsilon = 1e-12);
    }

    #[test]
    fn label_space_needs_two_classes() {
        assert!(LabelSpace::new(1).is_err());
        assert_eq!(LabelSpace::new(3).unwrap().size(), 3);
    }

    #[test]
    fn argmax_breaks_ties_by_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let ls = LabelSpace::new(2).unwrap();
        let bad = vec![Sample {
            signal_id: 0,
            bias_id: 0,
            label: 2,
        }];
        let prov = Provenance {
            seed: 0,
            world_id: "t".into(),
        };
        assert!(Dataset::new(bad, ls, prov).is_err());
    }

    #[test]
    fn dataset_split_holdout_partitions() {
        let ls = LabelSpace::new(2).unwrap();
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                signal_id: i,
                bias_id: 0,
                label: i % 2,
            })
            .collect();
        let prov = Provenance {
            seed: 1,
            world_id: "t".into(),
        };
        let ds = Dataset::new(samples, ls, prov).unwrap();
        let (train, hold) = ds.split_holdout(0.2).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(hold.len(), 2);
        assert_eq!(hold.samples()[0].signal_id, 8);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in proptest::collection::vec(0.0f64..10.0, 1..6)) {
            prop_assume!(raw.iter().any(|&v| v > 1e-6));
            let once = normalize(&raw).unwrap();
            let twice = normalize(once.entries()).unwrap();
            for i in 0..once.len() {
                prop_assert!((once.get(i) - twice.get(i)).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            z in proptest::collection::vec(-30.0f64..30.0, 2..5),
            c in -50.0f64..50.0,
        ) {
            let base = softmax(&LogitVector::new(z.clone()).unwrap());
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let moved = softmax(&LogitVector::new(shifted).unwrap());
            for i in 0..base.len() {
                prop_assert!((base.get(i) - moved.get(i)).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_output_is_on_the_simplex(z in proptest::collection::vec(-700.0f64..700.0, 2..6)) {
            let p = softmax(&LogitVector::new(z).unwrap());
            prop_assert!(ProbVector::new(p.entries().to_vec()).is_ok());
        }

        #[test]
        fn cross_entropy_is_non_negative(raw in proptest::collection::vec(0.01f64..1.0, 2..5), idx in 0usize..4) {
            let p = normalize(&raw).unwrap();
            let target = idx % p.len();
            let ce = cross_entropy(target, &p);
            prop_assert!(ce >= 0.0);
            // zero iff the target entry is 1
            prop_assert_eq!(ce == 0.0, p.get(target) == 1.0);
        }
    }
}
