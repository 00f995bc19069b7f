//! k-nearest-neighbor search over datastore keys under squared L2
//! distance. Backends implement [`Retriever`] and are resolved by name
//! through [`registry`].

mod exact;
mod ivf;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

pub use exact::ExactRetriever;
pub use ivf::{IvfIndex, IvfRetriever, KMeansReport, IVF_MAGIC};

use crate::datastore::{Datastore, Provenance};
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone)]
pub struct Query {
    pub vector: Vec<f32>,
    pub k: usize,
}

impl Query {
    pub fn new(vector: Vec<f32>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("query vector has a non-finite component"));
        }
        Ok(Self { vector, k })
    }

    fn check(&self, ds: &Datastore) -> Result<()> {
        if ds.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        if self.vector.len() != ds.dim() {
            return Err(Error::DimensionMismatch {
                expected: ds.dim(),
                got: self.vector.len(),
            });
        }
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub key: Vec<f32>,
    pub value: u32,
    pub distance: f32,
    pub provenance: Provenance,
}

/// Retrieved entries sorted by ascending distance, ties by entry index.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NeighborSet {
    pub items: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|n| n.index).collect()
    }

    /// The `i` nearest neighbors.
    pub fn top(&self, i: usize) -> NeighborSet {
        NeighborSet {
            items: self.items[..i.min(self.items.len())].to_vec(),
        }
    }
}

/// Squared Euclidean distance, accumulated sequentially in f32.
#[inline]
pub fn l2_squared(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Candidate ordered by (distance, index); the max-heap keeps the worst on top.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f32,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
    }
}

/// Bounded selection of the k smallest (distance, index) pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, distance: f32, index: usize) {
        let c = Candidate { distance, index };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub(crate) fn into_sorted(self) -> Vec<(f32, usize)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.distance, c.index))
            .collect()
    }

    pub(crate) fn into_neighbors(self, ds: &Datastore) -> NeighborSet {
        NeighborSet {
            items: self
                .into_sorted()
                .into_iter()
                .map(|(distance, index)| Neighbor {
                    index,
                    key: ds.key(index).to_vec(),
                    value: ds.value(index),
                    distance,
                    provenance: ds.provenance(index),
                })
                .collect(),
        }
    }
}

pub trait Retriever: Send + Sync {
    fn name(&self) -> &'static str;

    fn search(&self, ds: &Datastore, query: &Query) -> Result<NeighborSet>;

    /// Verifies that any index state was built for `ds`.
    fn check(&self, _ds: &Datastore) -> Result<()> {
        Ok(())
    }

    /// Independent per-query searches, returned in input order.
    fn search_batch(&self, ds: &Datastore, queries: &[Query]) -> Result<Vec<NeighborSet>> {
        queries.par_iter().map(|q| self.search(ds, q)).collect()
    }
}

/// Construction parameters shared by all retriever factories.
#[derive(Debug, Clone, Default)]
pub struct RetrieverSpec {
    pub index_path: Option<PathBuf>,
    pub nprobe: Option<usize>,
}

pub type RetrieverFactory = fn(&RetrieverSpec) -> Result<Box<dyn Retriever>>;

/// Built-in backends: `exact` and `ivf` (needs `index_path`).
pub fn registry() -> Registry<RetrieverFactory> {
    let mut reg: Registry<RetrieverFactory> = Registry::new("retriever");
    reg.register("exact", |_| Ok(Box::new(ExactRetriever)));
    reg.register("ivf", |spec| {
        let path = spec
            .index_path
            .as_ref()
            .ok_or_else(|| Error::param("the ivf retriever needs an index file"))?;
        let index = IvfIndex::load(path)?;
        let nprobe = spec.nprobe.unwrap_or(index.default_nprobe());
        Ok(Box::new(IvfRetriever::new(index, nprobe)?))
    });
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_keeps_smallest_with_index_tiebreak() {
        let mut t = TopK::new(3);
        for (d, i) in [(2.0, 0), (1.0, 5), (1.0, 2), (0.5, 9), (1.0, 1)] {
            t.push(d, i);
        }
        assert_eq!(t.into_sorted(), vec![(0.5, 9), (1.0, 1), (1.0, 2)]);
    }

    #[test]
    fn query_rejects_zero_k_and_nan() {
        assert!(Query::new(vec![1.0], 0).is_err());
        assert!(Query::new(vec![f32::NAN], 1).is_err());
    }

    #[test]
    fn registry_resolves_builtins() {
        let reg = registry();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["exact", "ivf"]);
        let exact = (reg.get("exact").unwrap())(&RetrieverSpec::default()).unwrap();
        assert_eq!(exact.name(), "exact");
        assert!((reg.get("ivf").unwrap())(&RetrieverSpec::default()).is_err());
        assert!(reg.get("hnsw").is_err());
    }
}
