//! Smoothed corpus BLEU over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

pub const MAX_ORDER: usize = 4;

/// Numerator used for an n-gram order with no matches.
pub const BLEU_EPSILON: f64 = 0.1;

pub const BLEU_SMOOTHING: &str = "corpus 4-gram BLEU; zero match counts replaced by 0.1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram precisions pooled over the corpus, geometric mean with
/// uniform weights, times the brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> BleuScore {
    assert_eq!(hypotheses.len(), references.len(), "one reference per hypothesis");
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let r = ngram_counts(reference, n);
            for (g, c) in ngram_counts(hyp, n) {
                matches[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let m = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        precisions[n] = m / totals[n].max(1) as f64;
    }
    if hyp_len == 0 {
        return BleuScore {
            score: 0.0,
            precisions,
            brevity_penalty: 0.0,
            hyp_len,
            ref_len,
        };
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
    BleuScore {
        score: (100.0 * brevity_penalty * log_mean.exp()).clamp(0.0, 100.0),
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}
