//! A small windowed feed-forward seq2seq model.
//!
//! The source sentence is summarized by its mean embedding passed through a
//! linear projection. The decoder sees that summary together with the
//! embeddings of the last `window` target tokens (left-padded, starting from
//! bos), applies one tanh layer of width `dim`, and projects to vocabulary
//! logits. The tanh activation is the hidden state used as a datastore key.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::Serialize;

use crate::corpus::{ParallelCorpus, SentencePair};
use crate::distribution::Distribution;
use crate::error::{Error, Result};
use crate::fingerprint::fnv1a;
use crate::vocab::{Vocab, BOS, PAD};

pub const MODEL_MAGIC: &[u8; 8] = b"KNNBX001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, window: 3 }
    }
}

/// All trainable tensors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `V × d`
    pub embedding: Vec<f64>,
    /// `d × d`, applied to the mean source embedding.
    pub src_proj: Vec<f64>,
    /// `d × (window + 1)·d`
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    /// `d × V`
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl Params {
    pub fn zeros(vocab: usize, dim: usize, window: usize) -> Self {
        Self {
            embedding: vec![0.0; vocab * dim],
            src_proj: vec![0.0; dim * dim],
            hidden_w: vec![0.0; dim * (window + 1) * dim],
            hidden_b: vec![0.0; dim],
            out_w: vec![0.0; dim * vocab],
            out_b: vec![0.0; vocab],
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        [
            &self.embedding,
            &self.src_proj,
            &self.hidden_w,
            &self.hidden_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.embedding,
            &mut self.src_proj,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Result of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Pre-projection activation (the retrieval key).
    pub hidden: Vec<f64>,
    pub probs: Distribution,
}

impl StepOutput {
    pub fn key(&self) -> Vec<f32> {
        self.hidden.iter().map(|&v| v as f32).collect()
    }
}

/// Projected source summary, computed once per sentence.
#[derive(Debug, Clone)]
pub struct SourceContext {
    mean: Vec<f64>,
    projected: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    vocab: Vocab,
    dim: usize,
    window: usize,
    params: Params,
}

impl BaseModel {
    /// Random initialization; weights are rounded to single precision so a
    /// checkpoint round trip is exact.
    pub fn new(vocab: Vocab, cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.window == 0 {
            return Err(Error::param("model dim and window must be positive"));
        }
        let v = vocab.len();
        let d = cfg.dim;
        let fan_in = (cfg.window + 1) * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(v, d, cfg.window);
        // Embeddings of words absent from training keep this scale.
        let emb = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        params.embedding.iter_mut().for_each(|w| *w = emb.sample(&mut rng));
        let glorot = |rng: &mut ChaCha8Rng, t: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            t.iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        };
        glorot(&mut rng, &mut params.src_proj, d, d);
        glorot(&mut rng, &mut params.hidden_w, fan_in, d);
        glorot(&mut rng, &mut params.out_w, d, v);
        params.round_to_f32();
        Ok(Self {
            vocab,
            dim: d,
            window: cfg.window,
            params,
        })
    }

    pub fn from_params(vocab: Vocab, cfg: ModelConfig, params: Params) -> Result<Self> {
        let expected = Params::zeros(vocab.len(), cfg.dim, cfg.window);
        for (a, b) in expected.tensors().iter().zip(params.tensors()) {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    got: b.len(),
                });
            }
        }
        if !params.all_finite() {
            return Err(Error::param("non-finite model weight"));
        }
        Ok(Self {
            vocab,
            dim: cfg.dim,
            window: cfg.window,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            window: self.window,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn embedding(&self, id: u32) -> &[f64] {
        let d = self.dim;
        &self.params.embedding[id as usize * d..(id as usize + 1) * d]
    }

    pub fn source_context(&self, source: &[u32]) -> Result<SourceContext> {
        if source.is_empty() {
            return Err(Error::param("empty source sentence"));
        }
        self.vocab.check_ids(source)?;
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for &id in source {
            mean.iter_mut().zip(self.embedding(id)).for_each(|(m, e)| *m += e);
        }
        let inv = 1.0 / source.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let projected = (0..d)
            .map(|i| dot(&self.params.src_proj[i * d..(i + 1) * d], &mean))
            .collect();
        Ok(SourceContext { mean, projected })
    }

    /// The `window` most recent decoder inputs, oldest first: bos followed
    /// by the prefix, left-padded with pad.
    pub fn window_ids(&self, prefix: &[u32]) -> Vec<u32> {
        let m = self.window;
        let mut ids = vec![PAD; m];
        let history = std::iter::once(BOS).chain(prefix.iter().copied());
        let total = prefix.len() + 1;
        for (i, id) in history.enumerate() {
            if i + m >= total {
                ids[i + m - total] = id;
            }
        }
        ids
    }

    fn decoder_input(&self, ctx: &SourceContext, prefix: &[u32]) -> Vec<f64> {
        let mut z = Vec::with_capacity((self.window + 1) * self.dim);
        z.extend_from_slice(&ctx.projected);
        for id in self.window_ids(prefix) {
            z.extend_from_slice(self.embedding(id));
        }
        z
    }

    fn hidden_from_input(&self, z: &[f64]) -> Vec<f64> {
        let width = z.len();
        (0..self.dim)
            .map(|i| {
                (dot(&self.params.hidden_w[i * width..(i + 1) * width], z) + self.params.hidden_b[i])
                    .tanh()
            })
            .collect()
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        let mut logits = self.params.out_b.clone();
        for (i, &h) in hidden.iter().enumerate() {
            let row = &self.params.out_w[i * v..(i + 1) * v];
            logits.iter_mut().zip(row).for_each(|(l, w)| *l += h * w);
        }
        logits
    }

    /// One decoder step given a precomputed source context.
    pub fn step(&self, ctx: &SourceContext, prefix: &[u32]) -> Result<StepOutput> {
        self.vocab.check_ids(prefix)?;
        let z = self.decoder_input(ctx, prefix);
        let hidden = self.hidden_from_input(&z);
        let probs = Distribution::softmax(&self.logits(&hidden));
        Ok(StepOutput { hidden, probs })
    }

    /// Hidden state and output distribution at context `(source, prefix)`.
    pub fn forward_step(&self, source: &[u32], prefix: &[u32]) -> Result<StepOutput> {
        let ctx = self.source_context(source)?;
        self.step(&ctx, prefix)
    }

    /// Summed teacher-forced negative log-likelihood of one pair,
    /// accumulating its gradient into `grad` when given.
    fn pair_loss(&self, pair: &SentencePair, mut grad: Option<&mut Params>) -> Result<f64> {
        let d = self.dim;
        let v = self.vocab.len();
        let width = (self.window + 1) * d;
        self.vocab.check_ids(&pair.target)?;
        let ctx = self.source_context(&pair.source)?;
        let mut grad_ctx = vec![0.0; d];
        let mut loss = 0.0;
        for t in 0..pair.target.len() {
            let prefix = &pair.target[..t];
            let gold = pair.target[t] as usize;
            let z = self.decoder_input(&ctx, prefix);
            let hidden = self.hidden_from_input(&z);
            let probs = Distribution::softmax(&self.logits(&hidden));
            loss -= probs.probs()[gold].ln();
            let Some(g) = grad.as_deref_mut() else { continue };

            let mut g_logits = probs.into_inner();
            g_logits[gold] -= 1.0;
            g.out_b.iter_mut().zip(&g_logits).for_each(|(b, gl)| *b += gl);
            let mut g_act = vec![0.0; d];
            for i in 0..d {
                let row = &self.params.out_w[i * v..(i + 1) * v];
                let g_row = &mut g.out_w[i * v..(i + 1) * v];
                g_row
                    .iter_mut()
                    .zip(&g_logits)
                    .for_each(|(gw, gl)| *gw += hidden[i] * gl);
                g_act[i] = dot(row, &g_logits) * (1.0 - hidden[i] * hidden[i]);
            }
            let mut g_input = vec![0.0; width];
            for i in 0..d {
                let ga = g_act[i];
                g.hidden_b[i] += ga;
                let row = &self.params.hidden_w[i * width..(i + 1) * width];
                let g_row = &mut g.hidden_w[i * width..(i + 1) * width];
                for j in 0..width {
                    g_row[j] += ga * z[j];
                    g_input[j] += ga * row[j];
                }
            }
            grad_ctx.iter_mut().zip(&g_input[..d]).for_each(|(a, b)| *a += b);
            for (k, id) in self.window_ids(prefix).into_iter().enumerate() {
                let block = &g_input[(k + 1) * d..(k + 2) * d];
                let dst = &mut g.embedding[id as usize * d..(id as usize + 1) * d];
                dst.iter_mut().zip(block).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(g) = grad {
            let mut g_mean = vec![0.0; d];
            for i in 0..d {
                let row = &self.params.src_proj[i * d..(i + 1) * d];
                let g_row = &mut g.src_proj[i * d..(i + 1) * d];
                for j in 0..d {
                    g_row[j] += grad_ctx[i] * ctx.mean[j];
                    g_mean[j] += grad_ctx[i] * row[j];
                }
            }
            let inv = 1.0 / pair.source.len() as f64;
            for &id in &pair.source {
                let dst = &mut g.embedding[id as usize * d..(id as usize + 1) * d];
                dst.iter_mut().zip(&g_mean).for_each(|(a, b)| *a += b * inv);
            }
        }
        Ok(loss)
    }

    /// Mean per-token teacher-forced cross-entropy (nats).
    pub fn loss(&self, corpus: &ParallelCorpus) -> Result<f64> {
        let mut total = 0.0;
        for pair in &corpus.pairs {
            total += self.pair_loss(pair, None)?;
        }
        Ok(total / corpus.target_tokens() as f64)
    }

    /// Mean per-token loss over `pairs` and its gradient.
    pub fn loss_and_gradient(&self, pairs: &[SentencePair]) -> Result<(f64, Params)> {
        let mut grad = Params::zeros(self.vocab.len(), self.dim, self.window);
        let mut total = 0.0;
        let mut tokens = 0;
        for pair in pairs {
            total += self.pair_loss(pair, Some(&mut grad))?;
            tokens += pair.target.len();
        }
        let inv = 1.0 / tokens.max(1) as f64;
        grad.scale(inv);
        Ok((total * inv, grad))
    }

    /// Plain SGD over shuffled sentence pairs, one update per pair.
    pub fn train(&mut self, corpus: &ParallelCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let initial_loss = self.loss(corpus)?;
        if !initial_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, loss: initial_loss });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let pair = &corpus.pairs[i];
                let (loss, grad) = self.loss_and_gradient(std::slice::from_ref(pair))?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1, loss });
                }
                total += loss * pair.target.len() as f64;
                self.params.add_scaled(-cfg.lr, &grad);
            }
            let mean = total / corpus.target_tokens() as f64;
            if !mean.is_finite() || !self.params.all_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, loss: mean });
            }
            epoch_losses.push(mean);
        }
        self.params.round_to_f32();
        let final_loss = self.loss(corpus)?;
        Ok(TrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
        })
    }

    /// Checkpoint bytes: magic, `d`, `window`, `V` (u32 LE), the six weight
    /// tensors as f32 LE in [`Params::tensors`] order, then the vocabulary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.window as u32)?;
        w.write_u32::<LittleEndian>(self.vocab.len() as u32)?;
        for t in self.params.tensors() {
            for &v in t.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        self.vocab.write_to(&mut w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::param("not a model checkpoint (bad magic)"));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let window = r.read_u32::<LittleEndian>()? as usize;
        let v = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Params::zeros(v, dim, window);
        for t in params.tensors_mut() {
            for w in t.iter_mut() {
                *w = r.read_f32::<LittleEndian>()? as f64;
            }
        }
        let vocab = Vocab::read_from(&mut r, v)?;
        if !r.is_empty() {
            return Err(Error::param("trailing bytes after model checkpoint"));
        }
        Self::from_params(vocab, ModelConfig { dim, window }, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Io(io) => Error::corrupt(path, format!("truncated checkpoint: {io}")),
            other => other,
        })
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
