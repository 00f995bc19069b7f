//! Turning retrieved neighbors into a vocabulary distribution and mixing it
//! with the base model's prediction.
//!
//! Two variants are built in: `basic` interpolates with a fixed weight, and
//! `adaptive` lets a small network choose, per step, how many neighbors to
//! trust (including none).

mod adaptive;
mod basic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use adaptive::{
    adaptive_combine, AdaptiveCombiner, MetaExample, MetaNet, MetaTrainConfig, MetaTrainReport,
    METANET_MAGIC,
};
pub use basic::BasicCombiner;

use crate::distribution::Distribution;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::retriever::NeighborSet;

/// Interpolation weight, temperature, retrieval width and variant name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub k: usize,
    pub variant: String,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 10.0,
            k: 8,
            variant: "basic".into(),
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        check_temperature(self.temperature)?;
        if self.k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::param(format!("temperature {t} must be positive")));
    }
    Ok(())
}

/// Retrieval distribution: each neighbor votes for its value with weight
/// `exp(-distance / T)`; tokens outside the neighbors' values get exactly 0.
///
/// Neighbors are re-sorted by (distance, index) and the smallest distance
/// is subtracted before exponentiation, so the result does not depend on
/// input order and does not underflow for small `T`.
pub fn knn_distribution(neighbors: &NeighborSet, temperature: f64, vocab_size: usize) -> Result<Distribution> {
    check_temperature(temperature)?;
    if neighbors.is_empty() {
        return Err(Error::param("knn distribution over an empty neighbor set"));
    }
    let mut items: Vec<(f64, usize, u32)> = neighbors
        .items
        .iter()
        .map(|n| (n.distance as f64, n.index, n.value))
        .collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = items[0].0;
    let mut weights = vec![0.0; vocab_size];
    for (distance, _, value) in items {
        let slot = weights.get_mut(value as usize).ok_or(Error::InvalidTokenId {
            id: value,
            size: vocab_size,
        })?;
        *slot += (-(distance - nearest) / temperature).exp();
    }
    Distribution::from_weights(weights)
}

/// `lambda * p_knn + (1 - lambda) * p_nmt`, elementwise.
pub fn interpolate(p_knn: &Distribution, p_nmt: &Distribution, lambda: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda {lambda} outside [0, 1]")));
    }
    if p_knn.len() != p_nmt.len() {
        return Err(Error::DimensionMismatch {
            expected: p_nmt.len(),
            got: p_knn.len(),
        });
    }
    let mixed = p_knn
        .probs()
        .iter()
        .zip(p_nmt.probs())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(Distribution::from_vec_unchecked(mixed))
}

/// Everything a combiner produced for one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Combination {
    /// Retrieval distribution over all neighbors.
    pub p_knn: Distribution,
    pub p_final: Distribution,
    /// Per-option weights (`w_0` for the base model, `w_i` for the top-i
    /// neighbors) when the combiner chooses them per step.
    pub option_weights: Option<Vec<f64>>,
}

pub trait Combiner: Send + Sync {
    fn name(&self) -> &'static str;

    /// Neighbors to retrieve per step.
    fn k(&self) -> usize;

    fn temperature(&self) -> f64;

    fn combine(&self, neighbors: &NeighborSet, p_nmt: &Distribution) -> Result<Combination>;
}

pub type CombinerFactory = fn(&CombinerConfig, Option<&Arc<MetaNet>>) -> Result<Box<dyn Combiner>>;

/// Built-in variants: `basic` and `adaptive` (needs a trained [`MetaNet`]).
pub fn registry() -> Registry<CombinerFactory> {
    let mut reg: Registry<CombinerFactory> = Registry::new("combiner");
    reg.register("basic", |cfg, _| {
        cfg.validate()?;
        Ok(Box::new(BasicCombiner::new(cfg.lambda, cfg.temperature, cfg.k)?))
    });
    reg.register("adaptive", |cfg, net| {
        cfg.validate()?;
        let net = net.ok_or_else(|| Error::param("the adaptive combiner needs a metanet checkpoint"))?;
        if net.k() != cfg.k {
            return Err(Error::param(format!(
                "metanet was trained for k={}, config asks for k={}",
                net.k(),
                cfg.k
            )));
        }
        Ok(Box::new(AdaptiveCombiner::new(Arc::clone(net), cfg.temperature)?))
    });
    reg
}

pub fn build(cfg: &CombinerConfig, metanet: Option<&Arc<MetaNet>>) -> Result<Box<dyn Combiner>> {
    (registry().get(&cfg.variant)?)(cfg, metanet)
}
