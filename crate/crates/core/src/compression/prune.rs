use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::ParallelCorpus;
use crate::datastore::{Datastore, TransformRecord};
use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::registry::Registry;
use crate::retriever::{l2_squared, TopK};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneMethod {
    pub name: String,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub kept: usize,
    pub dropped: usize,
    /// `kept / (kept + dropped)`
    pub scale: f64,
    pub method: PruneMethod,
}

/// Artifacts a pruner may consult besides the store itself.
#[derive(Clone, Copy, Default)]
pub struct PruneContext<'a> {
    pub model: Option<&'a BaseModel>,
    pub corpus: Option<&'a ParallelCorpus>,
}

pub trait Pruner: Send + Sync {
    fn name(&self) -> &'static str;

    /// Kind recorded in the store's transform chain.
    fn transform_kind(&self) -> &'static str;

    fn params(&self) -> serde_json::Value;

    /// Indices of the entries to keep, ascending.
    fn keep(&self, ds: &Datastore, ctx: &PruneContext<'_>) -> Result<Vec<usize>>;
}

/// Runs `pruner` and returns the reduced store with the report appended to
/// its transform chain.
pub fn prune(pruner: &dyn Pruner, ds: &Datastore, ctx: &PruneContext<'_>) -> Result<(Datastore, PruneReport)> {
    if ds.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    let kept = pruner.keep(ds, ctx)?;
    let n = ds.len();
    let report = PruneReport {
        kept: kept.len(),
        dropped: n - kept.len(),
        scale: kept.len() as f64 / n as f64,
        method: PruneMethod {
            name: pruner.name().to_string(),
            params: pruner.params(),
        },
    };
    let record = TransformRecord {
        kind: pruner.transform_kind().to_string(),
        params: serde_json::json!({
            "method": report.method.params,
            "kept": report.kept,
            "dropped": report.dropped,
            "scale": report.scale,
        }),
    };
    Ok((ds.select(&kept, record), report))
}

/// Greedy redundancy removal. Entries are visited in order; an entry is
/// dropped when its `neighbors_checked` nearest surviving entries all carry
/// its value and the nearest lies within `threshold`.
#[derive(Debug, Clone)]
pub struct RedundancyPruner {
    pub neighbors_checked: usize,
    /// Defaults to the median nearest-neighbor distance over a sample.
    pub threshold: Option<f32>,
    pub sample_size: usize,
    pub seed: u64,
}

impl RedundancyPruner {
    pub fn new(neighbors_checked: usize) -> Result<Self> {
        if neighbors_checked == 0 {
            return Err(Error::param("neighbors_checked must be at least 1"));
        }
        Ok(Self {
            neighbors_checked,
            threshold: None,
            sample_size: 1000,
            seed: 0,
        })
    }

    pub fn with_threshold(mut self, threshold: f32) -> Self {
        self.threshold = Some(threshold);
        self
    }

    /// Median distance from a sampled entry to its nearest other entry.
    pub fn median_nn_distance(ds: &Datastore, sample_size: usize, seed: u64) -> f32 {
        let n = ds.len();
        if n < 2 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, n, sample_size.min(n)).into_vec();
        picks.sort_unstable();
        let mut nn: Vec<f32> = picks
            .par_iter()
            .map(|&i| {
                let q = ds.key(i);
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| l2_squared(q, ds.key(j)))
                    .fold(f32::INFINITY, f32::min)
            })
            .collect();
        nn.sort_by(f32::total_cmp);
        nn[(nn.len() - 1) / 2]
    }

    pub fn resolved_threshold(&self, ds: &Datastore) -> f32 {
        self.threshold
            .unwrap_or_else(|| Self::median_nn_distance(ds, self.sample_size, self.seed))
    }
}

impl Pruner for RedundancyPruner {
    fn name(&self) -> &'static str {
        "redundant"
    }

    fn transform_kind(&self) -> &'static str {
        "prune_redundant"
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({
            "neighbors_checked": self.neighbors_checked,
            "threshold": self.threshold,
            "sample_size": self.sample_size,
            "seed": self.seed,
        })
    }

    fn keep(&self, ds: &Datastore, _ctx: &PruneContext<'_>) -> Result<Vec<usize>> {
        let n = ds.len();
        let threshold = self.resolved_threshold(ds);
        let mut alive = vec![true; n];
        let mut remaining = n;
        for i in 0..n {
            if remaining - 1 < self.neighbors_checked {
                continue;
            }
            let q = ds.key(i);
            let mut top = TopK::new(self.neighbors_checked);
            for j in (0..n).filter(|&j| j != i && alive[j]) {
                top.push(l2_squared(q, ds.key(j)), j);
            }
            let nearest = top.into_sorted();
            let value = ds.value(i);
            if nearest[0].0 <= threshold && nearest.iter().all(|&(_, j)| ds.value(j) == value) {
                alive[i] = false;
                remaining -= 1;
            }
        }
        Ok((0..n).filter(|&i| alive[i]).collect())
    }
}

/// Drops entries whose value the base model already ranks within its top
/// `rank` predictions at the entry's own context.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeMarginPruner {
    pub rank: usize,
}

impl Pruner for KnowledgeMarginPruner {
    fn name(&self) -> &'static str {
        "margin"
    }

    fn transform_kind(&self) -> &'static str {
        "prune_margin"
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({ "rank": self.rank })
    }

    fn keep(&self, ds: &Datastore, ctx: &PruneContext<'_>) -> Result<Vec<usize>> {
        let model = ctx
            .model
            .ok_or_else(|| Error::param("knowledge-margin pruning needs the base model"))?;
        let corpus = ctx
            .corpus
            .ok_or_else(|| Error::param("knowledge-margin pruning needs the datastore corpus"))?;
        ds.check_model(model)?;
        if corpus.name != ds.meta().corpus {
            return Err(Error::param(format!(
                "corpus '{}' does not match the datastore's corpus '{}'",
                corpus.name,
                ds.meta().corpus
            )));
        }
        let verdicts: Vec<bool> = (0..ds.len())
            .into_par_iter()
            .map(|i| -> Result<bool> {
                let prov = ds.provenance(i);
                let pair = corpus
                    .pairs
                    .get(prov.sentence as usize)
                    .filter(|p| (prov.position as usize) < p.target.len())
                    .ok_or_else(|| Error::param(format!("entry {i} has out-of-range provenance")))?;
                let pos = prov.position as usize;
                let out = model.forward_step(&pair.source, &pair.target[..pos])?;
                Ok(out.probs.rank_of(ds.value(i)) >= self.rank)
            })
            .collect::<Result<_>>()?;
        Ok((0..ds.len()).filter(|&i| verdicts[i]).collect())
    }
}

/// Parameters understood by the built-in pruner factories.
#[derive(Debug, Clone)]
pub struct PrunerSpec {
    pub rank: usize,
    pub neighbors_checked: usize,
    pub threshold: Option<f32>,
    pub seed: u64,
}

impl Default for PrunerSpec {
    fn default() -> Self {
        Self {
            rank: 1,
            neighbors_checked: 2,
            threshold: None,
            seed: 0,
        }
    }
}

pub type PrunerFactory = fn(&PrunerSpec) -> Result<Box<dyn Pruner>>;

/// Built-in pruners: `margin` and `redundant`.
pub fn registry() -> Registry<PrunerFactory> {
    let mut reg: Registry<PrunerFactory> = Registry::new("pruner");
    reg.register("margin", |spec| Ok(Box::new(KnowledgeMarginPruner { rank: spec.rank })));
    reg.register("redundant", |spec| {
        let mut p = RedundancyPruner::new(spec.neighbors_checked)?;
        p.threshold = spec.threshold;
        p.seed = spec.seed;
        Ok(Box::new(p))
    });
    reg
}
