use serde::{Deserialize, Serialize};

/// Boolean membership vector over the `m` claim labels of a catalog.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClaimLabelSet(Vec<bool>);

impl ClaimLabelSet {
    pub fn empty(m: usize) -> Self {
        Self(vec![false; m])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_indices(m: usize, active: &[usize]) -> Self {
        let mut bits = vec![false; m];
        for &i in active {
            bits[i] = true;
        }
        Self(bits)
    }

    /// Thresholds per-label probabilities at `tau` (inclusive).
    pub fn from_probs(probs: &[f64], tau: f64) -> Self {
        Self(probs.iter().map(|&p| p >= tau).collect())
    }

    /// Number of labels `m`.
    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.0[i] = on;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| **a || **b).count()
    }

    /// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.
    pub fn jaccard(&self, other: &Self) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            1.0
        } else {
            self.intersection_count(other) as f64 / union as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_cases() {
        let a = ClaimLabelSet::from_indices(4, &[0, 1]);
        let b = ClaimLabelSet::from_indices(4, &[0]);
        assert_eq!(a.jaccard(&b), 0.5);
        assert_eq!(a.jaccard(&a), 1.0);
        let c = ClaimLabelSet::from_indices(4, &[2, 3]);
        assert_eq!(a.jaccard(&c), 0.0);
        let e = ClaimLabelSet::empty(4);
        assert_eq!(e.jaccard(&e), 1.0);
        assert_eq!(e.jaccard(&a), 0.0);
    }
}
