use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map with four reserved ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Self::from_tokens(f.tokens, f.min_freq)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            min_freq: v.min_freq,
        }
    }
}

impl Vocabulary {
    /// Keeps every token seen at least `min_freq` times, ordered by
    /// descending frequency then lexically.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_freq && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, min_freq)
    }

    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, min_freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens of `ids`, stopping at the first EOS and dropping other
    /// reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len() || i == UNK)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

/// `[BOS, content…, EOS]` ids, optionally padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Encodes `tokens`, truncating the content so the sequence fits `max_len`.
    pub fn encode<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S], max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(TensorError::Contract(format!("max_len {max_len} leaves no room for BOS and EOS")));
        }
        let mut ids = Vec::with_capacity(tokens.len().min(max_len - 2) + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().take(max_len - 2).map(|t| vocab.id(t.as_ref())));
        ids.push(EOS);
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content ids between BOS and EOS.
    pub fn content(&self) -> &[usize] {
        let end = self.ids.iter().position(|&i| i == EOS).unwrap_or(self.ids.len());
        let start = usize::from(self.ids.first() == Some(&BOS));
        &self.ids[start..end.max(start)]
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.ids.len()).collect()
    }

    /// Teacher-forcing pair: inputs `ids[..L−1]`, targets `ids[1..]`, with
    /// targets past EOS and PAD targets masked as `None`.
    pub fn shifted(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let inputs = self.ids[..self.ids.len() - 1].to_vec();
        let mut done = false;
        let targets = self.ids[1..]
            .iter()
            .map(|&t| {
                if done || t == PAD {
                    return None;
                }
                done = t == EOS;
                Some(t)
            })
            .collect();
        (inputs, targets)
    }

    pub fn padded(&self, len: usize) -> Vec<usize> {
        let mut v = self.ids.clone();
        v.resize(len.max(v.len()), PAD);
        v
    }
}
