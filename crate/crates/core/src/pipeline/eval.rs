use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bleu::{corpus_bleu, BleuScore, BLEU_SMOOTHING};
use super::{DatastoreStats, Pipeline};
use crate::combiner::{CombinerConfig, MetaExample, MetaNet, MetaTrainConfig, MetaTrainReport};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TeacherForced,
    FreeRunning,
}

/// Settings an evaluation ran under.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMeta {
    /// Absent for base-model-only runs.
    pub combiner: Option<CombinerConfig>,
    pub retriever: Option<String>,
    pub datastore: Option<DatastoreStats>,
    pub beam: usize,
    pub max_len: usize,
    pub bleu_smoothing: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub sentences: usize,
    /// Target tokens scored, eos included.
    pub tokens: usize,
    /// Top-1 accuracy at gold prefixes.
    pub accuracy: f64,
    /// `exp` of the mean negative log-likelihood (nats per token).
    pub perplexity: f64,
    /// Corpus BLEU of decoded outputs; free-running mode only.
    pub bleu: Option<f64>,
    pub bleu_detail: Option<BleuScore>,
    pub meta: EvalMeta,
}

#[derive(Default, Clone, Copy)]
struct TokenStats {
    correct: usize,
    tokens: usize,
    nll: f64,
}

impl Pipeline {
    fn teacher_forced_sentence(&self, source: &[u32], target: &[u32]) -> Result<TokenStats> {
        let ctx = self.model.source_context(source)?;
        let mut stats = TokenStats::default();
        for t in 0..target.len() {
            let p = self.step(&ctx, &target[..t])?.p_final;
            stats.correct += usize::from(p.argmax() == target[t]);
            stats.nll -= p.prob(target[t]).ln();
            stats.tokens += 1;
        }
        Ok(stats)
    }

    pub fn meta(&self) -> EvalMeta {
        EvalMeta {
            combiner: self.combiner.as_ref().map(|_| self.combiner_config.clone()),
            retriever: self.retrieval.as_ref().map(|r| r.retriever.name().to_string()),
            datastore: self.datastore_stats(),
            beam: self.beam,
            max_len: self.max_len,
            bleu_smoothing: BLEU_SMOOTHING,
        }
    }

    /// Sentences are scored in parallel and merged in corpus order, so the
    /// report does not depend on scheduling.
    pub fn evaluate(&self, test: &ParallelCorpus, mode: EvalMode) -> Result<EvalReport> {
        if test.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let per_sentence: Vec<TokenStats> = test
            .pairs
            .par_iter()
            .map(|p| self.teacher_forced_sentence(&p.source, &p.target))
            .collect::<Result<_>>()?;
        let total = per_sentence.iter().fold(TokenStats::default(), |acc, s| TokenStats {
            correct: acc.correct + s.correct,
            tokens: acc.tokens + s.tokens,
            nll: acc.nll + s.nll,
        });
        let bleu_detail = match mode {
            EvalMode::TeacherForced => None,
            EvalMode::FreeRunning => {
                let hyps: Vec<Vec<u32>> = test
                    .pairs
                    .par_iter()
                    .map(|p| self.generate(&p.source).map(|g| g.content().to_vec()))
                    .collect::<Result<_>>()?;
                let refs: Vec<Vec<u32>> = test
                    .pairs
                    .iter()
                    .map(|p| p.target.iter().copied().filter(|&t| t != crate::vocab::EOS).collect())
                    .collect();
                Some(corpus_bleu(&hyps, &refs))
            }
        };
        Ok(EvalReport {
            mode,
            sentences: test.len(),
            tokens: total.tokens,
            accuracy: total.correct as f64 / total.tokens as f64,
            perplexity: (total.nll / total.tokens as f64).exp(),
            bleu: bleu_detail.as_ref().map(|b| b.score),
            bleu_detail,
            meta: self.meta(),
        })
    }

    /// Supervision for a learned combiner: one example per target token of
    /// `corpus`, retrieving `k` neighbors at each gold prefix.
    pub fn meta_examples(&self, corpus: &ParallelCorpus, k: usize, temperature: f64) -> Result<Vec<MetaExample>> {
        let retrieval = self
            .retrieval
            .as_ref()
            .ok_or_else(|| Error::param("collecting combiner examples needs a datastore"))?;
        if k > retrieval.datastore.len() {
            return Err(Error::param(format!(
                "k={k} exceeds the datastore size {}",
                retrieval.datastore.len()
            )));
        }
        let per_sentence: Vec<Vec<MetaExample>> = corpus
            .pairs
            .par_iter()
            .map(|p| -> Result<Vec<MetaExample>> {
                let ctx = self.model.source_context(&p.source)?;
                (0..p.target.len())
                    .map(|t| {
                        let out = self.model.step(&ctx, &p.target[..t])?;
                        let neighbors = retrieval.search(retrieval.query_vector(out.key())?, k)?;
                        MetaExample::new(&neighbors, &out.probs, p.target[t], temperature)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(per_sentence.into_iter().flatten().collect())
    }

    /// Fits a meta network on `heldout` against this pipeline's datastore.
    pub fn train_metanet(
        &self,
        heldout: &ParallelCorpus,
        k: usize,
        temperature: f64,
        hidden: usize,
        cfg: &MetaTrainConfig,
    ) -> Result<(MetaNet, MetaTrainReport)> {
        if heldout.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let examples = self.meta_examples(heldout, k, temperature)?;
        let mut net = MetaNet::new(k, hidden, cfg.seed);
        net.fit_normalization(&examples);
        let report = net.train(&examples, cfg)?;
        Ok((net, report))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{fixture, knn_pipeline};
    use super::*;
    use std::sync::Arc;

    #[test]
    fn evaluation_is_deterministic() {
        let f = fixture();
        let p = knn_pipeline(&f, 0.5, 2);
        let a = p.evaluate(&f.test, EvalMode::FreeRunning).unwrap();
        let b = p.evaluate(&f.test, EvalMode::FreeRunning).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert!(a.perplexity > 0.0);
        assert!((0.0..=100.0).contains(&a.bleu.unwrap()));
    }

    #[test]
    fn metrics_match_a_sequential_recount() {
        let f = fixture();
        let p = knn_pipeline(&f, 0.5, 1);
        let report = p.evaluate(&f.test, EvalMode::TeacherForced).unwrap();
        let (mut correct, mut nll, mut n) = (0usize, 0.0f64, 0usize);
        for pair in &f.test.pairs {
            for t in 0..pair.target.len() {
                let out = f.model.forward_step(&pair.source, &pair.target[..t]).unwrap();
                let r = p.retrieval().unwrap();
                let nb = r.search(out.key(), 8).unwrap();
                let knn = crate::combiner::knn_distribution(&nb, 10.0, out.probs.len()).unwrap();
                let fin = crate::combiner::interpolate(&knn, &out.probs, 0.5).unwrap();
                correct += usize::from(fin.argmax() == pair.target[t]);
                nll -= fin.prob(pair.target[t]).ln();
                n += 1;
            }
        }
        assert_eq!(report.tokens, n);
        assert_eq!(report.accuracy, correct as f64 / n as f64);
        assert!((report.perplexity - (nll / n as f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let f = fixture();
        let empty = f.test.slice(0..0);
        let p = Pipeline::base_only(Arc::clone(&f.model), 1, 5).unwrap();
        assert!(matches!(p.evaluate(&empty, EvalMode::TeacherForced), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn one_example_per_target_token() {
        let f = fixture();
        let p = knn_pipeline(&f, 0.5, 1);
        let ex = p.meta_examples(&f.test, 4, 10.0).unwrap();
        assert_eq!(ex.len(), f.test.target_tokens());
        assert!(ex.iter().all(|e| e.features.len() == 8 && e.option_gold.len() == 5));
    }
}
