//! Datastore footprint reduction: key dimension reduction and entry
//! pruning. Every operation reads a store and produces a new one, recording
//! itself in the output's transform chain.
//!
//! Per-step adaptive retrieval is not a compression pass here; it is the
//! "no neighbors" option of the adaptive combiner.

mod pca;
mod prune;

pub use pca::{fit_pca, project_2d, top_eigenvectors, PcaFit, PcaTransform};
pub use prune::{
    prune, registry, KnowledgeMarginPruner, PruneContext, PruneMethod, PruneReport, Pruner, PrunerFactory,
    PrunerSpec, RedundancyPruner,
};
