use super::{l2_squared, NeighborSet, Query, Retriever, TopK};
use crate::datastore::Datastore;
use crate::error::Result;

/// Linear scan over every key.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactRetriever;

impl Retriever for ExactRetriever {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn search(&self, ds: &Datastore, query: &Query) -> Result<NeighborSet> {
        query.check(ds)?;
        let mut top = TopK::new(query.k);
        for (i, key) in ds.keys().chunks_exact(ds.dim()).enumerate() {
            top.push(l2_squared(&query.vector, key), i);
        }
        Ok(top.into_neighbors(ds))
    }
}
