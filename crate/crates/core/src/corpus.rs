use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{Vocab, EOS};

/// Raw (source, target) sentence pairs.
pub type TextPairs = Vec<(String, String)>;

/// Reads a tab-separated corpus: one `source<TAB>target` pair per line.
pub fn read_tsv(path: impl AsRef<Path>) -> Result<TextPairs> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::corrupt(path, format!("line {}: missing tab", lineno + 1)))?;
        pairs.push((src.trim().to_string(), tgt.trim().to_string()));
    }
    Ok(pairs)
}

pub fn write_tsv(path: impl AsRef<Path>, pairs: &[(String, String)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (s, t) in pairs {
        writeln!(w, "{s}\t{t}")?;
    }
    w.flush()?;
    Ok(())
}

/// One tokenized sentence pair. The target always ends with eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn from_text(name: impl Into<String>, vocab: &Vocab, pairs: &[(String, String)]) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|(s, t)| SentencePair {
                source: vocab.encode(s),
                target: vocab.encode_target(t),
            })
            .collect();
        Self::new(name, vocab.len(), pairs)
    }

    pub fn new(name: impl Into<String>, vocab_size: usize, pairs: Vec<SentencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::param(format!("pair {i} has an empty side")));
            }
            if p.target.last() != Some(&EOS) {
                return Err(Error::param(format!("target of pair {i} does not end with eos")));
            }
            for &id in p.source.iter().chain(&p.target) {
                if id as usize >= vocab_size {
                    return Err(Error::InvalidTokenId { id, size: vocab_size });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of target tokens, eos included.
    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).sum()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            name: self.name.clone(),
            pairs: self.pairs[range].to_vec(),
        }
    }
}
