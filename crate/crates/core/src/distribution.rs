use serde::Serialize;

use crate::error::{Error, Result};

/// Normalization tolerance shared by every distribution in the system.
pub const NORM_TOL: f64 = 1e-6;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Wraps `probs`, checking non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::param("distribution over an empty support"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::param(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::param(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(Self::new(probs.clone()).is_ok());
        Self(probs)
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::param(format!("cannot normalize weights with total {sum}")));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Self::new(weights)
    }

    /// Numerically stable softmax.
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        Self(out)
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut v = vec![0.0; size];
        v[index] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.0[token as usize]
    }

    /// Most probable token; ties go to the lowest id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Zero-based rank of `token`: the number of tokens ordered before it
    /// (higher probability, or equal probability and lower id).
    pub fn rank_of(&self, token: u32) -> usize {
        let t = token as usize;
        let p = self.0[t];
        self.0
            .iter()
            .enumerate()
            .filter(|(i, q)| **q > p || (**q == p && *i < t))
            .count()
    }

    /// The `n` most probable tokens, descending, ties by lower id.
    pub fn top(&self, n: usize) -> Vec<(u32, f64)> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx.into_iter().map(|i| (i as u32, self.0[i])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_vectors() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Distribution::new(vec![]).is_err());
        assert!(Distribution::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let d = Distribution::softmax(&[0.0; 5]);
        assert!(d.probs().iter().all(|p| (*p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let d = Distribution::softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((d.prob(0) - 0.5).abs() < 1e-12);
        assert_eq!(d.prob(2), 0.0);
    }

    #[test]
    fn argmax_rank_and_top_agree_on_ties() {
        let d = Distribution::new(vec![0.1, 0.3, 0.3, 0.3]).unwrap();
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.rank_of(1), 0);
        assert_eq!(d.rank_of(3), 2);
        assert_eq!(d.rank_of(0), 3);
        let top: Vec<u32> = d.top(2).iter().map(|t| t.0).collect();
        assert_eq!(top, vec![1, 2]);
    }
}
