//! Whitespace-token vocabulary with fixed special ids.

use std::collections::{BTreeMap, HashMap};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::fingerprint::fnv1a;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw (source, target) text pairs.
    ///
    /// Specials take ids 0..4; the remaining `max_size - 4` slots go to the
    /// most frequent tokens of both sides, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(pairs: &[(S, S)], max_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size < SPECIALS.len() {
            return Err(Error::param(format!(
                "max_size {max_size} cannot hold the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (src, tgt) in pairs {
            for tok in src.as_ref().split_whitespace().chain(tgt.as_ref().split_whitespace()) {
                if !SPECIALS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        // BTreeMap iteration is already lexicographic; the stable sort keeps it
        // as the tie-break.
        ranked.sort_by_key(|&(_, c)| std::cmp::Reverse(c));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_tokens(
            SPECIALS
                .iter()
                .copied()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .map(str::to_string)
                .collect(),
        )
    }

    /// Reconstructs a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s)
        {
            return Err(Error::param("vocabulary must start with the special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::param(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Encodes a target sentence, appending eos.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Joins surface forms, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::InvalidTokenId { id, size: self.len() }),
            None => Ok(()),
        }
    }

    /// Length-prefixed UTF-8 strings, one per id.
    pub fn write_to(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for t in &self.tokens {
            w.write_u32::<LittleEndian>(t.len() as u32)?;
            w.write_all(t.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl std::io::Read, size: usize) -> Result<Self> {
        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            tokens.push(
                String::from_utf8(buf).map_err(|e| Error::param(format!("vocab entry: {e}")))?,
            );
        }
        Self::from_tokens(tokens)
    }

    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        fnv1a(&buf)
    }
}
