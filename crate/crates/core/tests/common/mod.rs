#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use knnbox::combiner::{CombinerConfig, MetaExample, MetaNet, MetaTrainConfig};
use knnbox::compression::{prune, KnowledgeMarginPruner, PruneContext, PruneReport};
use knnbox::corpus::{ParallelCorpus, SentencePair};
use knnbox::datastore::{Datastore, DatastoreMeta, Provenance};
use knnbox::model::{BaseModel, ModelConfig, TrainConfig};
use knnbox::pipeline::{EvalMode, Pipeline, Retrieval};
use knnbox::retriever::{Neighbor, NeighborSet};
use knnbox::synth::{general_domain, TwoDomain};
use knnbox::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of the pinned toy scenario.
pub const SEED: u64 = 3;
pub const K: usize = 8;
pub const TEMPERATURE: f64 = 10.0;
pub const HIDDEN: usize = 32;
pub const MAX_LEN: usize = 32;

/// The bundled two-domain scenario with a trained base model and the
/// full new-domain datastore.
pub struct Scenario {
    pub data: TwoDomain,
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub store: ParallelCorpus,
    pub heldout: ParallelCorpus,
    pub test: ParallelCorpus,
    pub mixed_heldout: ParallelCorpus,
    pub mixed_test: ParallelCorpus,
    pub model: Arc<BaseModel>,
    pub datastore: Arc<Datastore>,
    pub build_seconds: f64,
}

impl Scenario {
    pub fn build(seed: u64) -> Self {
        let start = Instant::now();
        let data = TwoDomain::generate(seed);
        let vocab = Vocab::build(&data.all_pairs(), 10_000).unwrap();
        let corpus = |name: &str, pairs: &[(String, String)]| ParallelCorpus::from_text(name, &vocab, pairs).unwrap();
        let train = corpus("train", &data.train);
        let store = corpus("store", &data.datastore);
        let heldout = corpus("heldout", &data.heldout);
        let test = corpus("test", &data.test);
        let mixed_heldout = corpus("mixed_heldout", &data.mixed_heldout());
        let mixed_test = corpus("mixed_test", &data.mixed_test());
        let mut model = BaseModel::new(vocab.clone(), ModelConfig::default(), seed).unwrap();
        model.train(&train, &TrainConfig::default()).unwrap();
        let model = Arc::new(model);
        let datastore = Arc::new(Datastore::build(&model, &store).unwrap());
        Self {
            data,
            vocab,
            train,
            store,
            heldout,
            test,
            mixed_heldout,
            mixed_test,
            model,
            datastore,
            build_seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn base(&self) -> Pipeline {
        Pipeline::base_only(Arc::clone(&self.model), 1, MAX_LEN).unwrap()
    }

    pub fn basic(&self, ds: &Arc<Datastore>, lambda: f64) -> Pipeline {
        let cfg = CombinerConfig {
            lambda,
            temperature: TEMPERATURE,
            k: K,
            variant: "basic".into(),
        };
        let retrieval = Retrieval::exact(Arc::clone(ds)).unwrap();
        Pipeline::new(Arc::clone(&self.model), Some(retrieval), None, cfg, 1, MAX_LEN).unwrap()
    }

    /// Adaptive combiner whose meta network is fitted on `heldout` against `ds`.
    pub fn adaptive(&self, ds: &Arc<Datastore>, heldout: &ParallelCorpus) -> Pipeline {
        let collector = self.basic(ds, 0.5);
        let (net, _) = collector
            .train_metanet(heldout, K, TEMPERATURE, HIDDEN, &MetaTrainConfig::default())
            .unwrap();
        let cfg = CombinerConfig {
            variant: "adaptive".into(),
            ..collector.combiner_config().clone()
        };
        Pipeline::new(
            Arc::clone(&self.model),
            collector.retrieval().cloned(),
            Some(Arc::new(net)),
            cfg,
            1,
            MAX_LEN,
        )
        .unwrap()
    }

    pub fn margin_pruned(&self, rank: usize) -> (Arc<Datastore>, PruneReport) {
        let ctx = PruneContext {
            model: Some(&self.model),
            corpus: Some(&self.store),
        };
        let (ds, report) = prune(&KnowledgeMarginPruner { rank }, &self.datastore, &ctx).unwrap();
        (Arc::new(ds), report)
    }

    pub fn noisy(&self) -> Arc<Datastore> {
        Arc::new(
            self.datastore
                .with_corrupted_values(0.5, self.model.vocab_size(), SEED)
                .unwrap(),
        )
    }
}

static SCENARIO: OnceLock<Scenario> = OnceLock::new();

pub fn scenario() -> &'static Scenario {
    SCENARIO.get_or_init(|| Scenario::build(SEED))
}

pub fn accuracy(p: &Pipeline, corpus: &ParallelCorpus) -> f64 {
    p.evaluate(corpus, EvalMode::TeacherForced).unwrap().accuracy
}

/// General-domain pairs whose targets hold exactly `tokens` ids, eos included.
pub fn pairs_with_target_tokens(tokens: usize, seed: u64) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut left = tokens;
    let mut stream = general_domain(4 * tokens, seed).into_iter();
    while left > 0 {
        let pair = stream.next().expect("enough candidate pairs");
        let len = pair.1.split_whitespace().count() + 1;
        if len <= left && fillable(left - len) {
            left -= len;
            out.push(pair);
        }
    }
    out
}

/// Whether `r` is a sum of bundled target lengths (5 or 6 ids with eos).
fn fillable(r: usize) -> bool {
    (0..=r / 5).any(|a| (r - 5 * a).is_multiple_of(6))
}

pub fn random_store(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Datastore {
    let keys: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let values: Vec<u32> = (0..n).map(|_| rng.gen_range(4..50)).collect();
    let provenance = (0..n as u32)
        .map(|i| Provenance {
            sentence: i,
            position: 0,
        })
        .collect();
    let meta = DatastoreMeta {
        n,
        dim,
        vocab_fp: "0".into(),
        model_fp: "0".into(),
        corpus: "random".into(),
        transforms: Vec::new(),
    };
    Datastore::from_parts(keys, values, provenance, meta).unwrap()
}

/// Indices of the `k` nearest keys by a naive double loop in f64, ties by index.
pub fn naive_knn(keys: &[f32], dim: usize, query: &[f32], k: usize) -> Vec<usize> {
    let n = keys.len() / dim;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = 0.0f64;
        for j in 0..dim {
            let diff = query[j] as f64 - keys[i * dim + j] as f64;
            d += diff * diff;
        }
        scored.push((d, i));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn neighbor_set(entries: &[(u32, f32)]) -> NeighborSet {
    let mut items: Vec<Neighbor> = entries
        .iter()
        .enumerate()
        .map(|(i, &(value, distance))| Neighbor {
            index: i,
            key: vec![0.0],
            value,
            distance,
            provenance: Provenance {
                sentence: i as u32,
                position: 0,
            },
        })
        .collect();
    items.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    NeighborSet { items }
}

/// Corpus BLEU written directly from its definition: clipped n-gram counts
/// pooled over sentences, 0.1 in place of a zero match count, geometric mean
/// of four precisions, brevity penalty on the pooled lengths.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matched = [0.0f64; 4];
    let mut possible = [0.0f64; 4];
    let (mut c, mut r) = (0.0f64, 0.0f64);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len() as f64;
        r += rf.len() as f64;
        for n in 1..=4usize {
            let mut hc: BTreeMap<String, i64> = BTreeMap::new();
            let mut rc: BTreeMap<String, i64> = BTreeMap::new();
            if h.len() >= n {
                for i in 0..=h.len() - n {
                    *hc.entry(h[i..i + n].join("\u{1}")).or_default() += 1;
                }
                possible[n - 1] += (h.len() - n + 1) as f64;
            }
            if rf.len() >= n {
                for i in 0..=rf.len() - n {
                    *rc.entry(rf[i..i + n].join("\u{1}")).or_default() += 1;
                }
            }
            for (g, count) in &hc {
                matched[n - 1] += (*count).min(*rc.get(g).unwrap_or(&0)) as f64;
            }
        }
    }
    if c == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let m = if matched[n] == 0.0 { 0.1 } else { matched[n] };
        log_sum += (m / possible[n].max(1.0)).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Largest relative error between an analytic gradient and central
/// differences; entries where both are below `floor` are compared against
/// `floor` instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_EPS: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// A small random model and a 3-pair corpus for finite-difference checks.
pub fn tiny_model_and_corpus(seed: u64) -> (BaseModel, ParallelCorpus) {
    let pairs = vec![
        ("the cat is big".to_string(), "le chat est grand".to_string()),
        ("a dog eats".to_string(), "un chien mange".to_string()),
        ("the cat eats the bread".to_string(), "le chat mange le pain".to_string()),
    ];
    let vocab = Vocab::build(&pairs, 100).unwrap();
    let corpus = ParallelCorpus::from_text("tiny", &vocab, &pairs).unwrap();
    let mut model = BaseModel::new(vocab, ModelConfig { dim: 5, window: 3 }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.params_mut().tensors_mut() {
        t.iter_mut().for_each(|w| *w = rng.gen_range(-0.8..0.8));
    }
    (model, corpus)
}

/// Max relative error over every weight of the base model.
pub fn model_gradient_error(seed: u64) -> f64 {
    let (mut model, corpus) = tiny_model_and_corpus(seed);
    let pairs: Vec<SentencePair> = corpus.pairs.clone();
    let (_, grad) = model.loss_and_gradient(&pairs).unwrap();
    let mut worst = 0.0f64;
    for (t, g) in grad.tensors().iter().enumerate() {
        for i in 0..g.len() {
            let orig = model.params().tensors()[t][i];
            model.params_mut().tensors_mut()[t][i] = orig + FD_EPS;
            let plus = model.loss(&corpus).unwrap();
            model.params_mut().tensors_mut()[t][i] = orig - FD_EPS;
            let minus = model.loss(&corpus).unwrap();
            model.params_mut().tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(g[i], numeric, FD_FLOOR));
        }
    }
    worst
}

/// Five random supervision steps for a `k`-neighbor meta network.
pub fn toy_meta_examples(k: usize, seed: u64) -> Vec<MetaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|_| {
            let entries: Vec<(u32, f32)> = (0..k)
                .map(|_| (rng.gen_range(4..9u32), rng.gen_range(0..40) as f32 / 4.0))
                .collect();
            let neighbors = neighbor_set(&entries);
            let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..1.0)).collect();
            let p_nmt = knnbox::distribution::Distribution::from_weights(weights).unwrap();
            MetaExample::new(&neighbors, &p_nmt, rng.gen_range(4..9), TEMPERATURE).unwrap()
        })
        .collect()
}

/// Max relative error over every meta-network parameter.
pub fn metanet_gradient_error(seed: u64) -> f64 {
    let k = 4;
    let examples = toy_meta_examples(k, seed);
    let mut net = MetaNet::new(k, 6, seed);
    net.fit_normalization(&examples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    net.params_mut().iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    let (_, grad) = net.loss_and_gradient(&examples);
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + FD_EPS;
        let plus = net.loss(&examples);
        net.params_mut()[i] = orig - FD_EPS;
        let minus = net.loss(&examples);
        net.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        worst = worst.max(relative_error(grad[i], numeric, FD_FLOOR));
    }
    worst
}
