//! Adaptive combination: a two-layer network reads the neighbor distances
//! and how many distinct values the top-j neighbors carry, and outputs a
//! weight for each of the `k + 1` options "use the top-i neighbors"
//! (i = 0 meaning the base model alone). The final distribution is the
//! weighted mixture of the option distributions.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_temperature, knn_distribution, Combination, Combiner};
use crate::distribution::Distribution;
use crate::error::{Error, Result};
use crate::retriever::NeighborSet;

pub const METANET_MAGIC: &[u8; 8] = b"KNNBX00M";
const FEATURE_LAYOUT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    k: usize,
    hidden: usize,
    /// Input standardization: `(feature - mean) / scale`.
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    /// `w1 (hidden × 2k) | b1 (hidden) | w2 ((k+1) × hidden) | b2 (k+1)`
    params: Vec<f64>,
}

/// One supervised step: network features and, for every option, the
/// probability that option's distribution assigns to the gold token.
#[derive(Debug, Clone)]
pub struct MetaExample {
    pub features: Vec<f64>,
    pub option_gold: Vec<f64>,
}

impl MetaExample {
    pub fn new(neighbors: &NeighborSet, p_nmt: &Distribution, gold: u32, temperature: f64) -> Result<Self> {
        let features = MetaNet::features(neighbors);
        let options = option_distributions(neighbors, p_nmt, temperature)?;
        Ok(Self {
            features,
            option_gold: options.iter().map(|p| p.prob(gold)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.03,
            batch: 32,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetaTrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

struct Forward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    weights: Vec<f64>,
}

impl MetaNet {
    pub fn new(k: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = 2 * k;
        let mut params = vec![0.0; hidden * inputs + hidden + (k + 1) * hidden + k + 1];
        let a1 = (6.0 / (inputs + hidden) as f64).sqrt();
        params[..hidden * inputs]
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-a1..a1) as f32 as f64);
        let a2 = (6.0 / (hidden + k + 1) as f64).sqrt();
        let w2 = hidden * inputs + hidden;
        params[w2..w2 + (k + 1) * hidden]
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-a2..a2) as f32 as f64);
        Self {
            k,
            hidden,
            feat_mean: vec![0.0; inputs],
            feat_scale: vec![1.0; inputs],
            params,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `[d_1, …, d_k, c_1, …, c_k]` where `c_j` counts the distinct values
    /// among the `j` nearest neighbors.
    pub fn features(neighbors: &NeighborSet) -> Vec<f64> {
        let mut distances = Vec::with_capacity(2 * neighbors.len());
        let mut counts = Vec::with_capacity(neighbors.len());
        let mut seen: Vec<u32> = Vec::new();
        for n in &neighbors.items {
            distances.push(n.distance as f64);
            if !seen.contains(&n.value) {
                seen.push(n.value);
            }
            counts.push(seen.len() as f64);
        }
        distances.extend(counts);
        distances
    }

    /// Sets the input standardization from the examples' feature statistics.
    pub fn fit_normalization(&mut self, examples: &[MetaExample]) {
        let inputs = 2 * self.k;
        if examples.is_empty() {
            return;
        }
        let n = examples.len() as f64;
        for j in 0..inputs {
            let mean = examples.iter().map(|e| e.features[j]).sum::<f64>() / n;
            let var = examples.iter().map(|e| (e.features[j] - mean).powi(2)).sum::<f64>() / n;
            self.feat_mean[j] = mean as f32 as f64;
            self.feat_scale[j] = if var > 1e-12 { var.sqrt() as f32 as f64 } else { 1.0 };
        }
    }

    fn split(&self) -> (usize, usize, usize) {
        let inputs = 2 * self.k;
        let b1 = self.hidden * inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + (self.k + 1) * self.hidden;
        (b1, w2, b2)
    }

    fn forward_with(&self, params: &[f64], features: &[f64]) -> Forward {
        let inputs = 2 * self.k;
        let (b1, w2, b2) = self.split();
        let input: Vec<f64> = features
            .iter()
            .zip(self.feat_mean.iter().zip(&self.feat_scale))
            .map(|(f, (m, s))| (f - m) / s)
            .collect();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let row = &params[i * inputs..(i + 1) * inputs];
                (crate::model::dot(row, &input) + params[b1 + i]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..=self.k)
            .map(|o| {
                let row = &params[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                crate::model::dot(row, &hidden) + params[b2 + o]
            })
            .collect();
        Forward {
            input,
            hidden,
            weights: Distribution::softmax(&logits).into_inner(),
        }
    }

    /// Weights over the `k + 1` options for a feature vector.
    pub fn option_weights(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != 2 * self.k {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.k,
                got: features.len(),
            });
        }
        Ok(self.forward_with(&self.params, features).weights)
    }

    /// Mean negative log-likelihood of the gold tokens and its gradient
    /// with respect to [`MetaNet::params`].
    pub fn loss_and_gradient(&self, examples: &[MetaExample]) -> (f64, Vec<f64>) {
        self.loss_and_gradient_at(&self.params, examples)
    }

    fn loss_and_gradient_at(&self, params: &[f64], examples: &[MetaExample]) -> (f64, Vec<f64>) {
        let inputs = 2 * self.k;
        let (b1, w2, b2) = self.split();
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for ex in examples {
            let f = self.forward_with(params, &ex.features);
            let mix: f64 = f.weights.iter().zip(&ex.option_gold).map(|(w, c)| w * c).sum();
            loss -= mix.ln();
            let g_logits: Vec<f64> = f
                .weights
                .iter()
                .zip(&ex.option_gold)
                .map(|(w, c)| w - w * c / mix)
                .collect();
            let mut g_hidden = vec![0.0; self.hidden];
            for (o, g) in g_logits.iter().enumerate() {
                grad[b2 + o] += g;
                for i in 0..self.hidden {
                    grad[w2 + o * self.hidden + i] += g * f.hidden[i];
                    g_hidden[i] += g * params[w2 + o * self.hidden + i];
                }
            }
            for i in 0..self.hidden {
                let ga = g_hidden[i] * (1.0 - f.hidden[i] * f.hidden[i]);
                grad[b1 + i] += ga;
                for j in 0..inputs {
                    grad[i * inputs + j] += ga * f.input[j];
                }
            }
        }
        let inv = 1.0 / examples.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }

    pub fn loss(&self, examples: &[MetaExample]) -> f64 {
        self.loss_at(&self.params, examples)
    }

    fn loss_at(&self, params: &[f64], examples: &[MetaExample]) -> f64 {
        let total: f64 = examples
            .iter()
            .map(|ex| {
                let w = self.forward_with(params, &ex.features).weights;
                -w.iter().zip(&ex.option_gold).map(|(w, c)| w * c).sum::<f64>().ln()
            })
            .sum();
        total / examples.len().max(1) as f64
    }

    /// Mini-batch Adam on the mean gold negative log-likelihood. The
    /// parameters with the lowest full-set loss seen (initial included) are
    /// kept, so training never ends worse than it started.
    pub fn train(&mut self, examples: &[MetaExample], cfg: &MetaTrainConfig) -> Result<MetaTrainReport> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(bad) = examples
            .iter()
            .find(|e| e.features.len() != 2 * self.k || e.option_gold.len() != self.k + 1)
        {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.k,
                got: bad.features.len(),
            });
        }
        let initial_loss = self.loss(examples);
        if !initial_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, loss: initial_loss });
        }
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; self.params.len()];
        let mut v = vec![0.0; self.params.len()];
        let mut step = 0i32;
        let mut params = self.params.clone();
        let mut best = (initial_loss, params.clone());
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut batch = Vec::with_capacity(cfg.batch.max(1));
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch.max(1)) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| examples[i].clone()));
                let (_, grad) = self.loss_and_gradient_at(&params, &batch);
                step += 1;
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            let rounded: Vec<f64> = params.iter().map(|&p| p as f32 as f64).collect();
            let epoch_loss = self.loss_at(&rounded, examples);
            if !epoch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, loss: epoch_loss });
            }
            epoch_losses.push(epoch_loss);
            if epoch_loss < best.0 {
                best = (epoch_loss, rounded);
            }
        }
        self.params = best.1;
        Ok(MetaTrainReport {
            initial_loss,
            epoch_losses,
            final_loss: best.0,
        })
    }

    /// Checkpoint: magic, `k`, feature layout version, hidden width (u32
    /// LE), then feature means, feature scales and parameters as f32 LE.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(METANET_MAGIC)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_u32::<LittleEndian>(FEATURE_LAYOUT)?;
        w.write_u32::<LittleEndian>(self.hidden as u32)?;
        for &v in self.feat_mean.iter().chain(&self.feat_scale).chain(&self.params) {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != METANET_MAGIC {
            return Err(Error::param("not a metanet checkpoint (bad magic)"));
        }
        let k = r.read_u32::<LittleEndian>()? as usize;
        let layout = r.read_u32::<LittleEndian>()?;
        if layout != FEATURE_LAYOUT {
            return Err(Error::param(format!("unsupported metanet feature layout {layout}")));
        }
        let hidden = r.read_u32::<LittleEndian>()? as usize;
        let mut net = Self::new(k, hidden, 0);
        let mut read = |dst: &mut [f64]| -> std::io::Result<()> {
            for v in dst.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            Ok(())
        };
        read(&mut net.feat_mean)?;
        read(&mut net.feat_scale)?;
        read(&mut net.params)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::param("trailing bytes after metanet checkpoint"));
        }
        if net.params.iter().chain(&net.feat_mean).chain(&net.feat_scale).any(|v| !v.is_finite()) {
            return Err(Error::param("non-finite metanet weight"));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(&std::fs::read(path)?[..]).map_err(|e| match e {
            Error::Io(io) => Error::corrupt(path, format!("truncated metanet: {io}")),
            other => other,
        })
    }
}

/// `[p_nmt, knn(top-1), …, knn(top-k)]`
pub(crate) fn option_distributions(
    neighbors: &NeighborSet,
    p_nmt: &Distribution,
    temperature: f64,
) -> Result<Vec<Distribution>> {
    check_temperature(temperature)?;
    let mut out = Vec::with_capacity(neighbors.len() + 1);
    out.push(p_nmt.clone());
    for i in 1..=neighbors.len() {
        out.push(knn_distribution(&neighbors.top(i), temperature, p_nmt.len())?);
    }
    Ok(out)
}

fn mix(options: &[Distribution], weights: &[f64]) -> Distribution {
    let mut out = vec![0.0; options[0].len()];
    for (p, w) in options.iter().zip(weights) {
        out.iter_mut().zip(p.probs()).for_each(|(o, x)| *o += w * x);
    }
    Distribution::from_vec_unchecked(out)
}

/// `w_0 · p_nmt + Σ_i w_i · knn(top-i neighbors)`, with `w` from the net.
pub fn adaptive_combine(
    net: &MetaNet,
    neighbors: &NeighborSet,
    p_nmt: &Distribution,
    temperature: f64,
) -> Result<Combination> {
    if neighbors.len() != net.k() {
        return Err(Error::param(format!(
            "metanet expects {} neighbors, got {}",
            net.k(),
            neighbors.len()
        )));
    }
    let weights = net.option_weights(&MetaNet::features(neighbors))?;
    let options = option_distributions(neighbors, p_nmt, temperature)?;
    Ok(Combination {
        p_final: mix(&options, &weights),
        p_knn: options.last().expect("k >= 1").clone(),
        option_weights: Some(weights),
    })
}

#[derive(Debug, Clone)]
pub struct AdaptiveCombiner {
    net: Arc<MetaNet>,
    temperature: f64,
}

impl AdaptiveCombiner {
    pub fn new(net: Arc<MetaNet>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self { net, temperature })
    }
}

impl Combiner for AdaptiveCombiner {
    fn name(&self) -> &'static str {
        "adaptive"
    }

    fn k(&self) -> usize {
        self.net.k()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn combine(&self, neighbors: &NeighborSet, p_nmt: &Distribution) -> Result<Combination> {
        adaptive_combine(&self.net, neighbors, p_nmt, self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::tests::neighbors;

    fn forced(k: usize, option: usize) -> MetaNet {
        let mut net = MetaNet::new(k, 4, 1);
        let (_, _, b2) = net.split();
        for v in net.params.iter_mut() {
            *v = 0.0;
        }
        net.params[b2 + option] = 1000.0;
        net
    }

    fn sample() -> (NeighborSet, Distribution) {
        let n = neighbors(&[(0.5, 4), (1.0, 5), (1.5, 4), (4.0, 6)]);
        let p_nmt = Distribution::softmax(&[0.0, 0.0, 0.1, 0.0, 1.0, 2.0, 0.5, 0.2]);
        (n, p_nmt)
    }

    #[test]
    fn features_count_distinct_prefix_values() {
        let (n, _) = sample();
        assert_eq!(MetaNet::features(&n), vec![0.5, 1.0, 1.5, 4.0, 1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn option_zero_reproduces_model() {
        let (n, p_nmt) = sample();
        let out = adaptive_combine(&forced(4, 0), &n, &p_nmt, 10.0).unwrap();
        for (a, b) in out.p_final.probs().iter().zip(p_nmt.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn option_k_reproduces_full_retrieval() {
        let (n, p_nmt) = sample();
        let out = adaptive_combine(&forced(4, 4), &n, &p_nmt, 10.0).unwrap();
        let knn = knn_distribution(&n, 10.0, 8).unwrap();
        for (a, b) in out.p_final.probs().iter().zip(knn.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (n, p_nmt) = sample();
        assert!(adaptive_combine(&MetaNet::new(3, 4, 0), &n, &p_nmt, 10.0).is_err());
        assert!(MetaNet::new(3, 4, 0).option_weights(&[0.0; 5]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (n, p_nmt) = sample();
        let ex = MetaExample::new(&n, &p_nmt, 4, 10.0).unwrap();
        let mut net = MetaNet::new(4, 8, 3);
        let before = net.clone();
        let cfg = MetaTrainConfig { epochs: 3, lr: 0.0, batch: 2, seed: 0 };
        net.train(&[ex.clone(), ex], &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (n, p_nmt) = sample();
        let ex = MetaExample::new(&n, &p_nmt, 5, 10.0).unwrap();
        let mut net = MetaNet::new(4, 8, 3);
        net.fit_normalization(&[ex.clone(), MetaExample { features: vec![0.0; 8], ..ex }]);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], METANET_MAGIC);
        let back = MetaNet::read_from(&bytes[..]).unwrap();
        assert_eq!(back, net);
        assert!(MetaNet::read_from(&bytes[..bytes.len() - 1]).is_err());
    }
}
