use std::sync::Arc;

use super::Pipeline;
use crate::distribution::Distribution;
use crate::error::Result;
use crate::model::SourceContext;
use crate::retriever::NeighborSet;
use crate::vocab::EOS;

/// Everything computed at one decoder step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Retrieval query in key space (empty without retrieval).
    pub query: Vec<f32>,
    pub neighbors: NeighborSet,
    pub p_nmt: Distribution,
    pub p_knn: Option<Distribution>,
    pub p_final: Distribution,
    pub option_weights: Option<Vec<f64>>,
}

/// Best hypothesis with one record per emitted token.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Emitted ids, including the final eos when one was produced.
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    /// Sum of log final probabilities of the emitted tokens.
    pub score: f64,
    /// Whether decoding ended with eos rather than the length limit.
    pub finished: bool,
}

impl Generation {
    /// Emitted ids without the trailing eos.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    steps: Vec<Arc<StepRecord>>,
    score: f64,
}

impl Pipeline {
    /// Model, retrieval and combination for one context.
    pub fn step(&self, ctx: &SourceContext, prefix: &[u32]) -> Result<StepRecord> {
        let out = self.model.step(ctx, prefix)?;
        let (Some(retrieval), Some(combiner)) = (&self.retrieval, &self.combiner) else {
            return Ok(StepRecord {
                query: Vec::new(),
                neighbors: NeighborSet::default(),
                p_final: out.probs.clone(),
                p_nmt: out.probs,
                p_knn: None,
                option_weights: None,
            });
        };
        let query = retrieval.query_vector(out.key())?;
        let neighbors = retrieval.search(query.clone(), combiner.k())?;
        let combined = combiner.combine(&neighbors, &out.probs)?;
        Ok(StepRecord {
            query,
            neighbors,
            p_nmt: out.probs,
            p_knn: Some(combined.p_knn),
            p_final: combined.p_final,
            option_weights: combined.option_weights,
        })
    }

    /// Beam search over the final distribution; greedy when the beam is 1.
    /// Every live hypothesis retrieves independently at every step.
    pub fn generate(&self, source: &[u32]) -> Result<Generation> {
        let ctx = self.model.source_context(source)?;
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            steps: Vec::new(),
            score: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.max_len {
            let mut candidates = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let record = Arc::new(self.step(&ctx, &hyp.tokens)?);
                for (token, p) in record.p_final.top(self.beam) {
                    candidates.push((hyp.score + p.ln(), h, token, Arc::clone(&record)));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            candidates.truncate(self.beam);
            let mut next = Vec::with_capacity(self.beam);
            for (score, h, token, record) in candidates {
                let mut hyp = live[h].clone();
                hyp.tokens.push(token);
                hyp.steps.push(record);
                hyp.score = score;
                if token == EOS {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
            live = next;
            if live.is_empty() || finished.len() >= self.beam {
                break;
            }
        }
        let done = !finished.is_empty();
        let pool = if done { finished } else { live };
        let best = pool
            .into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("beam keeps at least one hypothesis");
        Ok(Generation {
            tokens: best.tokens,
            steps: best.steps.iter().map(|s| StepRecord::clone(s)).collect(),
            score: best.score,
            finished: done,
        })
    }

    /// Greedy decoding by repeated argmax, without beam bookkeeping.
    pub fn greedy(&self, source: &[u32]) -> Result<Vec<u32>> {
        let ctx = self.model.source_context(source)?;
        let mut tokens = Vec::new();
        while tokens.len() < self.max_len {
            let token = self.step(&ctx, &tokens)?.p_final.argmax();
            tokens.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(tokens)
    }
}
