//! Display-ready views of decoding steps.
//!
//! Distributions are cut to their most probable entries plus the leftover
//! mass; full vectors and raw keys are included only in verbose mode. Each
//! step carries 2-D coordinates for its query and neighbors: directions come
//! from a PCA fitted on that step's own points, and each neighbor sits at its
//! true distance from the query, so the plane keeps the distance ranking.

use serde::Serialize;

use crate::compression::project_2d;
use crate::corpus::ParallelCorpus;
use crate::distribution::Distribution;
use crate::pipeline::{Generation, StepRecord};
use crate::retriever::{l2_squared, Neighbor};
use crate::vocab::{Vocab, SPECIALS, UNK};

pub const DEFAULT_TOP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenRef {
    pub id: u32,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenProb {
    pub id: u32,
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistSummary {
    /// Descending by probability, ties by lower id.
    pub top: Vec<TokenProb>,
    /// Mass outside `top`.
    pub other: f64,
    /// Probability of the emitted token.
    pub chosen: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full: Option<Vec<f64>>,
}

/// The corpus pair an entry was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextView {
    pub source: String,
    pub target: String,
    pub target_tokens: Vec<String>,
    pub position: usize,
    /// Target tokens with the entry's position wrapped in brackets.
    pub highlighted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborView {
    pub rank: usize,
    pub index: usize,
    pub value: TokenRef,
    pub distance: f32,
    pub sentence: u32,
    pub position: u32,
    /// Absent when the service was started without the store's corpus.
    pub context: Option<ContextView>,
    pub xy: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub token: TokenRef,
    pub p_nmt: DistSummary,
    pub p_knn: Option<DistSummary>,
    pub p_final: DistSummary,
    pub option_weights: Option<Vec<f64>>,
    pub query_xy: [f64; 2],
    /// Ascending by distance.
    pub neighbors: Vec<NeighborView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<Vec<f32>>,
}

/// Renders [`StepRecord`]s against a vocabulary and, optionally, the
/// corpus the datastore was built from.
#[derive(Clone, Copy)]
pub struct TraceBuilder<'a> {
    vocab: &'a Vocab,
    corpus: Option<&'a ParallelCorpus>,
    top: usize,
    verbose: bool,
}

impl<'a> TraceBuilder<'a> {
    pub fn new(vocab: &'a Vocab) -> Self {
        Self {
            vocab,
            corpus: None,
            top: DEFAULT_TOP,
            verbose: false,
        }
    }

    pub fn with_corpus(mut self, corpus: Option<&'a ParallelCorpus>) -> Self {
        self.corpus = corpus;
        self
    }

    pub fn verbose(mut self, verbose: bool) -> Self {
        self.verbose = verbose;
        self
    }

    pub fn with_top(mut self, top: usize) -> Self {
        self.top = top;
        self
    }

    fn surface(&self, id: u32) -> String {
        self.vocab
            .token(id)
            .unwrap_or(SPECIALS[UNK as usize])
            .to_string()
    }

    pub fn token(&self, id: u32) -> TokenRef {
        TokenRef {
            id,
            token: self.surface(id),
        }
    }

    pub fn summarize(&self, p: &Distribution, chosen: u32) -> DistSummary {
        let top: Vec<TokenProb> = p
            .top(self.top)
            .into_iter()
            .map(|(id, prob)| TokenProb {
                id,
                token: self.surface(id),
                prob: prob.clamp(0.0, 1.0),
            })
            .collect();
        let covered: f64 = top.iter().map(|t| t.prob).sum();
        DistSummary {
            other: (1.0 - covered).clamp(0.0, 1.0),
            chosen: p.prob(chosen).clamp(0.0, 1.0),
            top,
            full: self.verbose.then(|| p.probs().to_vec()),
        }
    }

    pub fn context(&self, sentence: u32, position: u32) -> Option<ContextView> {
        let pair = self.corpus?.pairs.get(sentence as usize)?;
        let position = position as usize;
        let target_tokens: Vec<String> = pair.target.iter().map(|&id| self.surface(id)).collect();
        if position >= target_tokens.len() {
            return None;
        }
        let highlighted = target_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if i == position { format!("[{t}]") } else { t.clone() })
            .collect::<Vec<_>>()
            .join(" ");
        Some(ContextView {
            source: self.vocab.decode(&pair.source),
            target: self.vocab.decode(&pair.target),
            target_tokens,
            position,
            highlighted,
        })
    }

    pub fn neighbor(&self, rank: usize, n: &Neighbor, xy: [f64; 2]) -> NeighborView {
        NeighborView {
            rank,
            index: n.index,
            value: self.token(n.value),
            distance: n.distance,
            sentence: n.provenance.sentence,
            position: n.provenance.position,
            context: self.context(n.provenance.sentence, n.provenance.position),
            xy,
            key: self.verbose.then(|| n.key.clone()),
        }
    }

    pub fn step(&self, step: usize, record: &StepRecord, chosen: u32) -> StepTrace {
        let (query_xy, coords) = if record.neighbors.is_empty() {
            ([0.0, 0.0], Vec::new())
        } else {
            let points: Vec<&[f32]> = std::iter::once(record.query.as_slice())
                .chain(record.neighbors.items.iter().map(|n| n.key.as_slice()))
                .collect();
            let mut xy = project_2d(&points);
            let rest = xy.split_off(1);
            let distances: Vec<f64> = record
                .neighbors
                .items
                .iter()
                .map(|n| (l2_squared(&record.query, &n.key) as f64).sqrt())
                .collect();
            (xy[0], place_radially(xy[0], &rest, &distances))
        };
        StepTrace {
            step,
            token: self.token(chosen),
            p_nmt: self.summarize(&record.p_nmt, chosen),
            p_knn: record.p_knn.as_ref().map(|p| self.summarize(p, chosen)),
            p_final: self.summarize(&record.p_final, chosen),
            option_weights: record.option_weights.clone(),
            query_xy,
            neighbors: record
                .neighbors
                .items
                .iter()
                .zip(coords)
                .enumerate()
                .map(|(rank, (n, xy))| self.neighbor(rank, n, xy))
                .collect(),
            query: self.verbose.then(|| record.query.clone()),
        }
    }

    pub fn generation(&self, g: &Generation) -> Vec<StepTrace> {
        g.steps
            .iter()
            .zip(&g.tokens)
            .enumerate()
            .map(|(t, (record, &token))| self.step(t, record, token))
            .collect()
    }
}

/// Moves each point along its direction from `center` to the given radius.
/// Points that coincide with the center are spread on evenly spaced angles.
fn place_radially(center: [f64; 2], points: &[[f64; 2]], radii: &[f64]) -> Vec<[f64; 2]> {
    let count = points.len().max(1) as f64;
    points
        .iter()
        .zip(radii)
        .enumerate()
        .map(|(i, (p, r))| {
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            let norm = dx.hypot(dy);
            let (ux, uy) = if norm > 1e-12 {
                (dx / norm, dy / norm)
            } else {
                let angle = std::f64::consts::TAU * i as f64 / count;
                (angle.cos(), angle.sin())
            };
            [center[0] + r * ux, center[1] + r * uy]
        })
        .collect()
}

/// Squared distance in the plane.
pub fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Whether the neighbor nearest to the query in the plane is rank 0.
pub fn projection_keeps_nearest(step: &StepTrace) -> bool {
    let Some(first) = step.neighbors.first() else { return true };
    let best = planar_distance(step.query_xy, first.xy);
    step.neighbors[1..]
        .iter()
        .all(|n| planar_distance(step.query_xy, n.xy) >= best)
}
