//! Confidence-guided combination of expert outputs at inference.

use ndarray::Array1;

use crate::error::{GmopeError, Result};
use crate::scalar::Scalar;

/// One expert's output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPrediction<T> {
    pub embedding: Array1<T>,
    pub distribution: Array1<T>,
    pub confidence: T,
}

impl<T: Scalar> ExpertPrediction<T> {
    pub fn new(embedding: Array1<T>, distribution: Array1<T>) -> Result<Self> {
        let confidence = confidence(distribution.as_slice().expect("contiguous"))?;
        Ok(ExpertPrediction {
            embedding,
            distribution,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated<T> {
    pub embedding: Array1<T>,
    pub distribution: Array1<T>,
    /// Normalized weights over the active set, in active-set order.
    pub weights: Vec<T>,
}

impl<T: Scalar> Aggregated<T> {
    /// Index of the most probable class (lowest index on ties).
    pub fn predicted_class(&self) -> usize {
        argmax(self.distribution.as_slice().expect("contiguous"))
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `1 - H(p)/log C` with `0 log 0 = 0`.
pub fn confidence<T: Scalar>(distribution: &[T]) -> Result<T> {
    let c = distribution.len();
    if c < 2 {
        return Err(GmopeError::arg("confidence needs at least two classes"));
    }
    if distribution.iter().any(|&p| p < T::zero() || !p.is_finite()) {
        return Err(GmopeError::arg("distribution has negative or non-finite entries"));
    }
    let total: T = distribution.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-4) {
        return Err(GmopeError::arg(format!("distribution sums to {total}, not 1")));
    }
    let entropy: T = distribution
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum();
    let normalized = entropy / T::from_usize_lossy(c).ln();
    Ok((T::one() - normalized).max(T::zero()).min(T::one()))
}

/// Binary edge probability `p` as the distribution `(p, 1 - p)`.
pub fn binary_confidence<T: Scalar>(p: T) -> Result<T> {
    confidence(&[p, T::one() - p])
}

/// `ω_i = α_i / Σ_{j∈active} α_j`; uniform when every active α is zero.
pub fn confidence_weights<T: Scalar>(confidences: &[T]) -> Result<Vec<T>> {
    if confidences.is_empty() {
        return Err(GmopeError::arg("active set is empty"));
    }
    let total: T = confidences.iter().copied().sum();
    if total > T::zero() {
        Ok(confidences.iter().map(|&a| a / total).collect())
    } else {
        let u = T::one() / T::from_usize_lossy(confidences.len());
        Ok(vec![u; confidences.len()])
    }
}

/// Combine the predictions of the active experts.
pub fn aggregate<T: Scalar>(predictions: &[ExpertPrediction<T>], active: &[usize]) -> Result<Aggregated<T>> {
    if active.is_empty() {
        return Err(GmopeError::arg("active set is empty"));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= predictions.len()) {
        return Err(GmopeError::arg(format!("active expert {bad} has no prediction")));
    }
    let alphas: Vec<T> = active.iter().map(|&i| predictions[i].confidence).collect();
    let weights = confidence_weights(&alphas)?;
    let first = &predictions[active[0]];
    let mut embedding = Array1::zeros(first.embedding.len());
    let mut distribution = Array1::zeros(first.distribution.len());
    for (&i, &w) in active.iter().zip(&weights) {
        let p = &predictions[i];
        if p.embedding.len() != embedding.len() || p.distribution.len() != distribution.len() {
            return Err(GmopeError::arg("expert predictions disagree in shape"));
        }
        embedding.scaled_add(w, &p.embedding);
        distribution.scaled_add(w, &p.distribution);
    }
    Ok(Aggregated {
        embedding,
        distribution,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn confidence_extremes() {
        assert_eq!(confidence(&[0.25f64; 4]).unwrap(), 0.0);
        assert_eq!(confidence(&[0.0f64, 1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn confidence_binary_example() {
        let h = (0.9f64 * (1.0 / 0.9f64).ln() + 0.1 * (10.0f64).ln()) / 2.0f64.ln();
        let a = confidence(&[0.9f64, 0.1]).unwrap();
        assert!((a - (1.0 - h)).abs() < 1e-12);
        assert!((a - 0.531005).abs() < 1e-6);
        assert_eq!(binary_confidence(0.9f64).unwrap(), a);
    }

    #[test]
    fn confidence_rejects_bad_input() {
        assert!(confidence(&[0.5f64, 0.6]).is_err());
        assert!(confidence(&[1.0f64]).is_err());
        assert!(confidence(&[1.2f64, -0.2]).is_err());
    }

    fn pred(h: Array1<f64>, alpha: f64) -> ExpertPrediction<f64> {
        ExpertPrediction {
            embedding: h,
            distribution: array![0.5, 0.5],
            confidence: alpha,
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate(&[pred(array![1.5, -2.0], 0.3)], &[0]).unwrap();
        assert_eq!(one.embedding, array![1.5, -2.0]);
        let equal = aggregate(&[pred(array![1.0, 0.0], 0.4), pred(array![0.0, 1.0], 0.4)], &[0, 1]).unwrap();
        assert_eq!(equal.embedding, array![0.5, 0.5]);
        let skew = aggregate(&[pred(array![2.0, 0.0], 0.531005), pred(array![0.0, 2.0], 0.0)], &[0, 1]).unwrap();
        assert_eq!(skew.embedding, array![2.0, 0.0]);
        assert_eq!(skew.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn all_zero_confidence_falls_back_to_uniform() {
        let agg = aggregate(&[pred(array![1.0], 0.0), pred(array![3.0], 0.0)], &[0, 1]).unwrap();
        assert_eq!(agg.embedding, array![2.0]);
        assert!(aggregate(&[pred(array![1.0], 0.0)], &[]).is_err());
    }

    #[test]
    fn inactive_experts_are_ignored() {
        let preds = [pred(array![1.0], 0.9), pred(array![100.0], 0.9), pred(array![3.0], 0.9)];
        let agg = aggregate(&preds, &[0, 2]).unwrap();
        assert_eq!(agg.embedding, array![2.0]);
    }

    #[test]
    fn confidence_zero_iff_uniform_one_iff_one_hot() {
        // Grid over the simplex at resolution 0.01 for C = 2 and 3.
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let a = confidence(&[p, 1.0 - p]).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a.abs() < 1e-12, i == 50, "p={p}");
            assert_eq!((a - 1.0).abs() < 1e-12, i == 0 || i == 100, "p={p}");
        }
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let d = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                let a = confidence(&d).unwrap();
                assert!((-1e-12..=1.0 + 1e-12).contains(&a));
                let one_hot = d.iter().filter(|&&x| x == 1.0).count() == 1;
                assert_eq!((a - 1.0).abs() < 1e-12, one_hot, "{d:?}");
                // 1/3 is off-grid, so no grid point is uniform.
                assert!(a > 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn convex_and_permutation_invariant(
            rows in proptest::collection::vec((proptest::collection::vec(-10.0f64..10.0, 3), 0.0f64..1.0), 1..6),
        ) {
            let preds: Vec<_> = rows.iter().map(|(h, a)| pred(Array1::from(h.clone()), *a)).collect();
            let active: Vec<usize> = (0..preds.len()).collect();
            let agg = aggregate(&preds, &active).unwrap();
            let wsum: f64 = agg.weights.iter().sum();
            prop_assert!((wsum - 1.0).abs() < 1e-9);
            for c in 0..3 {
                let lo = preds.iter().map(|p| p.embedding[c]).fold(f64::INFINITY, f64::min);
                let hi = preds.iter().map(|p| p.embedding[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(agg.embedding[c] >= lo - 1e-9 && agg.embedding[c] <= hi + 1e-9);
            }
            let rev: Vec<_> = preds.iter().rev().cloned().collect();
            let agg2 = aggregate(&rev, &active).unwrap();
            for c in 0..3 {
                prop_assert!((agg.embedding[c] - agg2.embedding[c]).abs() < 1e-9);
            }
        }
    }
}
