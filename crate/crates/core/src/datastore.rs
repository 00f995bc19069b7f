//! The key–value datastore: one `(hidden state, gold token)` entry per
//! target token occurrence of a corpus, built by a teacher-forced pass.
//!
//! On disk a datastore is a directory holding
//!
//! * `keys.bin`   – row-major little-endian f32, `n × dim`
//! * `values.bin` – little-endian u32, `n`
//! * `prov.bin`   – little-endian u32 pairs `(sentence, position)`, `n`
//! * `meta.json`  – counts, fingerprints, corpus name and transform chain
//!
//! `keys.bin` is memory-mapped on load so scans need no deserialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use memmap2::Mmap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::fingerprint::{to_hex, Fingerprinter};
use crate::model::BaseModel;

pub const KEYS_FILE: &str = "keys.bin";
pub const VALUES_FILE: &str = "values.bin";
pub const PROV_FILE: &str = "prov.bin";
pub const META_FILE: &str = "meta.json";

/// Where an entry came from: sentence index and target position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub sentence: u32,
    pub position: u32,
}

/// One step of the transform chain recorded in `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub kind: String,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatastoreMeta {
    pub n: usize,
    pub dim: usize,
    pub vocab_fp: String,
    pub model_fp: String,
    pub corpus: String,
    pub transforms: Vec<TransformRecord>,
}

impl DatastoreMeta {
    /// Size relative to the untransformed store (product of pruning scales).
    pub fn scale(&self) -> f64 {
        self.transforms
            .iter()
            .filter_map(|t| t.params.get("scale").and_then(|s| s.as_f64()))
            .product()
    }

    pub fn transform_kinds(&self) -> Vec<&str> {
        self.transforms.iter().map(|t| t.kind.as_str()).collect()
    }
}

enum Keys {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

impl Keys {
    fn as_slice(&self) -> &[f32] {
        match self {
            Keys::Owned(v) => v,
            Keys::Mapped(m) => bytemuck::cast_slice(&m[..]),
        }
    }
}

pub struct Datastore {
    keys: Keys,
    values: Vec<u32>,
    provenance: Vec<Provenance>,
    meta: DatastoreMeta,
    fingerprint: u64,
}

impl std::fmt::Debug for Datastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datastore")
            .field("meta", &self.meta)
            .field("fingerprint", &to_hex(self.fingerprint))
            .finish_non_exhaustive()
    }
}

impl Datastore {
    /// Teacher-forced pass over `corpus`: one entry per target token
    /// (eos included), ordered by (sentence, position).
    pub fn build(model: &BaseModel, corpus: &ParallelCorpus) -> Result<Self> {
        let d = model.dim();
        let n = corpus.target_tokens();
        let mut keys = Vec::with_capacity(n * d);
        let mut values = Vec::with_capacity(n);
        let mut provenance = Vec::with_capacity(n);
        for (s, pair) in corpus.pairs.iter().enumerate() {
            model.vocab().check_ids(&pair.target)?;
            let ctx = model.source_context(&pair.source)?;
            for (t, &gold) in pair.target.iter().enumerate() {
                let out = model.step(&ctx, &pair.target[..t])?;
                keys.extend(out.hidden.iter().map(|&h| h as f32));
                values.push(gold);
                provenance.push(Provenance {
                    sentence: s as u32,
                    position: t as u32,
                });
            }
        }
        let meta = DatastoreMeta {
            n,
            dim: d,
            vocab_fp: to_hex(model.vocab().fingerprint()),
            model_fp: to_hex(model.fingerprint()),
            corpus: corpus.name.clone(),
            transforms: Vec::new(),
        };
        Self::from_parts(keys, values, provenance, meta)
    }

    /// Assembles a store from raw columns. `meta.n` and `meta.dim` must
    /// agree with the column lengths.
    pub fn from_parts(
        keys: Vec<f32>,
        values: Vec<u32>,
        provenance: Vec<Provenance>,
        meta: DatastoreMeta,
    ) -> Result<Self> {
        let n = values.len();
        if meta.n != n || provenance.len() != n {
            return Err(Error::param(format!(
                "column lengths disagree: meta n={}, values={n}, provenance={}",
                meta.n,
                provenance.len()
            )));
        }
        if keys.len() != n * meta.dim {
            return Err(Error::DimensionMismatch {
                expected: n * meta.dim,
                got: keys.len(),
            });
        }
        if let Some(k) = keys.iter().find(|k| !k.is_finite()) {
            return Err(Error::param(format!("non-finite key component {k}")));
        }
        Ok(Self::assemble(Keys::Owned(keys), values, provenance, meta))
    }

    fn assemble(keys: Keys, values: Vec<u32>, provenance: Vec<Provenance>, meta: DatastoreMeta) -> Self {
        let mut fp = Fingerprinter::default();
        fp.update(&(meta.n as u64).to_le_bytes())
            .update(&(meta.dim as u64).to_le_bytes())
            .update(&f32s_to_le(keys.as_slice()))
            .update(&u32s_to_le(&values));
        Self {
            fingerprint: fp.finish(),
            keys,
            values,
            provenance,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn meta(&self) -> &DatastoreMeta {
        &self.meta
    }

    /// Fingerprint of the key and value columns.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn keys(&self) -> &[f32] {
        self.keys.as_slice()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        let d = self.meta.dim;
        &self.keys.as_slice()[i * d..(i + 1) * d]
    }

    pub fn value(&self, i: usize) -> u32 {
        self.values[i]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.keys, Keys::Mapped(_))
    }

    /// Fails unless the store was built by `model` (and its vocabulary).
    pub fn check_model(&self, model: &BaseModel) -> Result<()> {
        let vocab_fp = to_hex(model.vocab().fingerprint());
        if vocab_fp != self.meta.vocab_fp {
            return Err(Error::FingerprintMismatch {
                what: "vocabulary",
                expected: self.meta.vocab_fp.clone(),
                found: vocab_fp,
            });
        }
        let model_fp = to_hex(model.fingerprint());
        if model_fp != self.meta.model_fp {
            return Err(Error::FingerprintMismatch {
                what: "model",
                expected: self.meta.model_fp.clone(),
                found: model_fp,
            });
        }
        Ok(())
    }

    /// New store holding the entries at `indices` (in the given order),
    /// with `transform` appended to the chain.
    pub fn select(&self, indices: &[usize], transform: TransformRecord) -> Self {
        let d = self.dim();
        let mut keys = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            keys.extend_from_slice(self.key(i));
        }
        let mut meta = self.meta.clone();
        meta.n = indices.len();
        meta.transforms.push(transform);
        Self::assemble(
            Keys::Owned(keys),
            indices.iter().map(|&i| self.values[i]).collect(),
            indices.iter().map(|&i| self.provenance[i]).collect(),
            meta,
        )
    }

    /// New store with every key replaced by `f(key)` of length `new_dim`.
    pub fn map_keys(
        &self,
        new_dim: usize,
        transform: TransformRecord,
        mut f: impl FnMut(&[f32]) -> Vec<f32>,
    ) -> Result<Self> {
        let mut keys = Vec::with_capacity(self.len() * new_dim);
        for i in 0..self.len() {
            let k = f(self.key(i));
            if k.len() != new_dim {
                return Err(Error::DimensionMismatch {
                    expected: new_dim,
                    got: k.len(),
                });
            }
            keys.extend(k);
        }
        let mut meta = self.meta.clone();
        meta.dim = new_dim;
        meta.transforms.push(transform);
        Self::from_parts(keys, self.values.clone(), self.provenance.clone(), meta)
    }

    /// Copy with `fraction` of the values replaced by uniformly random
    /// non-special tokens (which may coincide with the original).
    pub fn with_corrupted_values(&self, fraction: f64, vocab_size: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::param(format!("corruption fraction {fraction} outside [0,1]")));
        }
        if vocab_size <= crate::vocab::SPECIALS.len() {
            return Err(Error::param("vocabulary has no regular tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = self.values.clone();
        let mut corrupted = 0usize;
        for v in values.iter_mut() {
            if rng.gen_bool(fraction) {
                *v = rng.gen_range(crate::vocab::SPECIALS.len() as u32..vocab_size as u32);
                corrupted += 1;
            }
        }
        let mut meta = self.meta.clone();
        meta.transforms.push(TransformRecord {
            kind: "corrupt".into(),
            params: serde_json::json!({ "fraction": fraction, "seed": seed, "corrupted": corrupted }),
        });
        Ok(Self::assemble(
            Keys::Owned(self.keys().to_vec()),
            values,
            self.provenance.clone(),
            meta,
        ))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(KEYS_FILE), f32s_to_le(self.keys()))?;
        fs::write(dir.join(VALUES_FILE), u32s_to_le(&self.values))?;
        let prov: Vec<u32> = self
            .provenance
            .iter()
            .flat_map(|p| [p.sentence, p.position])
            .collect();
        fs::write(dir.join(PROV_FILE), u32s_to_le(&prov))?;
        let mut meta = fs::File::create(dir.join(META_FILE))?;
        serde_json::to_writer_pretty(&mut meta, &self.meta)?;
        meta.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta: DatastoreMeta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
        let n = meta.n;

        let values_path = dir.join(VALUES_FILE);
        let values = read_u32s(&values_path, n)?;
        let prov_path = dir.join(PROV_FILE);
        let provenance = read_u32s(&prov_path, 2 * n)?
            .chunks_exact(2)
            .map(|c| Provenance {
                sentence: c[0],
                position: c[1],
            })
            .collect();

        let keys_path = dir.join(KEYS_FILE);
        let expected = n * meta.dim * 4;
        let file = fs::File::open(&keys_path)?;
        let actual = file.metadata()?.len() as usize;
        if actual != expected {
            return Err(Error::corrupt(
                &keys_path,
                format!("size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        let keys = if expected > 0 && cfg!(target_endian = "little") {
            // SAFETY: the mapping is read-only and the datastore never
            // writes to files it has loaded.
            let map = unsafe { Mmap::map(&file)? };
            Keys::Mapped(map)
        } else {
            let bytes = fs::read(&keys_path)?;
            let mut v = vec![0f32; bytes.len() / 4];
            LittleEndian::read_f32_into(&bytes, &mut v);
            Keys::Owned(v)
        };
        if keys.as_slice().iter().any(|k| !k.is_finite()) {
            return Err(Error::corrupt(&keys_path, "non-finite key component"));
        }
        Ok(Self::assemble(keys, values, provenance, meta))
    }
}

fn read_u32s(path: &Path, count: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != count * 4 {
        return Err(Error::corrupt(
            path,
            format!("size mismatch: expected {} bytes, found {}", count * 4, bytes.len()),
        ));
    }
    let mut out = vec![0u32; count];
    LittleEndian::read_u32_into(&bytes, &mut out);
    Ok(out)
}

pub(crate) fn f32s_to_le(v: &[f32]) -> Vec<u8> {
    let mut out = vec![0u8; v.len() * 4];
    LittleEndian::write_f32_into(v, &mut out);
    out
}

pub(crate) fn u32s_to_le(v: &[u32]) -> Vec<u8> {
    let mut out = vec![0u8; v.len() * 4];
    LittleEndian::write_u32_into(v, &mut out);
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::SentencePair;
    use crate::model::ModelConfig;
    use crate::vocab::{Vocab, EOS};

    pub(crate) fn synthetic(keys: Vec<f32>, dim: usize, values: Vec<u32>) -> Datastore {
        let n = values.len();
        let meta = DatastoreMeta {
            n,
            dim,
            vocab_fp: String::new(),
            model_fp: String::new(),
            corpus: "synthetic".into(),
            transforms: vec![],
        };
        let prov = (0..n as u32).map(|i| Provenance { sentence: i, position: 0 }).collect();
        Datastore::from_parts(keys, values, prov, meta).unwrap()
    }

    fn model_and_corpus(pairs: Vec<SentencePair>) -> (BaseModel, ParallelCorpus) {
        let vocab = Vocab::build(&[("a b c", "x y z")], 100).unwrap();
        let model = BaseModel::new(vocab, ModelConfig { dim: 8, window: 3 }, 11).unwrap();
        let corpus = ParallelCorpus::new("tiny", model.vocab_size(), pairs).unwrap();
        (model, corpus)
    }

    #[test]
    fn one_entry_per_target_token() {
        let (model, corpus) = model_and_corpus(vec![SentencePair {
            source: vec![4, 5],
            target: vec![7, 8, EOS],
        }]);
        let ds = Datastore::build(&model, &corpus).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.values(), &[7, 8, EOS]);
        assert_eq!(ds.provenance(2), Provenance { sentence: 0, position: 2 });
        ds.check_model(&model).unwrap();
    }

    #[test]
    fn identical_pairs_give_identical_entries() {
        let pair = SentencePair { source: vec![4, 6], target: vec![9, 7, EOS] };
        let (model, corpus) = model_and_corpus(vec![pair.clone(), pair]);
        let ds = Datastore::build(&model, &corpus).unwrap();
        for i in 0..3 {
            assert_eq!(ds.key(i), ds.key(i + 3));
            assert_eq!(ds.value(i), ds.value(i + 3));
        }
    }

    #[test]
    fn save_load_round_trip_and_resave_is_bitwise_equal() {
        let (model, corpus) = model_and_corpus(vec![SentencePair {
            source: vec![4],
            target: vec![5, 6, EOS],
        }]);
        let ds = Datastore::build(&model, &corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        ds.save(&a).unwrap();
        let loaded = Datastore::load(&a).unwrap();
        assert!(loaded.is_mapped());
        assert_eq!(loaded.keys(), ds.keys());
        assert_eq!(loaded.meta(), ds.meta());
        assert_eq!(loaded.fingerprint(), ds.fingerprint());
        loaded.save(&b).unwrap();
        for f in [KEYS_FILE, VALUES_FILE, PROV_FILE, META_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_files_fail_with_size_mismatch() {
        let ds = synthetic(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, vec![4, 5, 6]);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let values = dir.path().join(VALUES_FILE);
        let bytes = fs::read(&values).unwrap();
        fs::write(&values, &bytes[..bytes.len() - 2]).unwrap();
        let err = Datastore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");

        ds.save(dir.path()).unwrap();
        let keys = dir.path().join(KEYS_FILE);
        let bytes = fs::read(&keys).unwrap();
        fs::write(&keys, &bytes[..4]).unwrap();
        let err = Datastore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn stale_model_is_rejected() {
        let (model, corpus) = model_and_corpus(vec![SentencePair { source: vec![4], target: vec![EOS] }]);
        let ds = Datastore::build(&model, &corpus).unwrap();
        let other = BaseModel::new(model.vocab().clone(), model.config(), 12).unwrap();
        assert!(matches!(
            ds.check_model(&other),
            Err(Error::FingerprintMismatch { what: "model", .. })
        ));
    }

    #[test]
    fn empty_store_round_trips() {
        let ds = synthetic(vec![], 4, vec![]);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Datastore::load(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn corruption_changes_roughly_the_requested_fraction() {
        let n = 2000;
        let ds = synthetic(vec![0.0; n], 1, vec![4; n]);
        let noisy = ds.with_corrupted_values(0.5, 50, 3).unwrap();
        let changed = noisy.values().iter().filter(|&&v| v != 4).count();
        assert!((800..1200).contains(&changed), "{changed}");
        assert_eq!(noisy.meta().transform_kinds(), vec!["corrupt"]);
        assert_ne!(noisy.fingerprint(), ds.fingerprint());
    }
}
