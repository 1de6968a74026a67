use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Byte `b` maps to id `b + 4`.
    ByteLevel,
    /// Whitespace-split words looked up in a fixed vocabulary.
    WhitespaceVocab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: HashMap<String, usize>,
    words: Vec<String>,
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Self {
            mode: TokenizerMode::ByteLevel,
            vocab: HashMap::new(),
            words: Vec::new(),
        }
    }

    /// Words get ids from 4 upward in the given order; duplicates are
    /// rejected.
    pub fn whitespace_vocab<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut vocab = HashMap::new();
        let mut list = Vec::new();
        for w in words {
            let w = w.as_ref().to_string();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid vocabulary word {w:?}")));
            }
            if vocab.insert(w.clone(), RESERVED + list.len()).is_some() {
                return Err(Error::input(format!("duplicate vocabulary word {w:?}")));
            }
            list.push(w);
        }
        Ok(Self {
            mode: TokenizerMode::WhitespaceVocab,
            vocab,
            words: list,
        })
    }

    /// Vocabulary of the `max_words` most frequent words in `texts`, ties
    /// broken lexicographically.
    pub fn fit_whitespace<S: AsRef<str>>(texts: &[S], max_words: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::whitespace_vocab(ranked.into_iter().take(max_words).map(|(w, _)| w))
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        match self.mode {
            TokenizerMode::ByteLevel => RESERVED + 256,
            TokenizerMode::WhitespaceVocab => RESERVED + self.words.len(),
        }
    }

    /// `[CLS]` followed by the token ids of `text`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::ByteLevel => self.encode_bytes(text.as_bytes()),
            TokenizerMode::WhitespaceVocab => std::iter::once(CLS)
                .chain(
                    text.split_whitespace()
                        .map(|w| self.vocab.get(w).copied().unwrap_or(UNK)),
                )
                .collect(),
        }
    }

    /// Byte-level encoding of raw bytes, `[CLS]` first.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        std::iter::once(CLS)
            .chain(bytes.iter().map(|&b| b as usize + RESERVED))
            .collect()
    }

    /// Inverse of [`encode_bytes`](Self::encode_bytes); reserved ids are
    /// dropped.
    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        ids.iter()
            .filter(|&&id| id >= RESERVED)
            .map(|&id| {
                u8::try_from(id - RESERVED)
                    .map_err(|_| Error::input(format!("id {id} is not a byte-level token")))
            })
            .collect()
    }

    /// Text for an id sequence. Byte-level output must be valid UTF-8;
    /// whitespace-vocab output joins words with single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self.mode {
            TokenizerMode::ByteLevel => String::from_utf8(self.decode_bytes(ids)?)
                .map_err(|e| Error::input(format!("decoded bytes are not UTF-8: {e}"))),
            TokenizerMode::WhitespaceVocab => {
                let words: Vec<&str> = ids
                    .iter()
                    .filter(|&&id| id != PAD && id != CLS && id != SEP)
                    .map(|&id| match id {
                        UNK => Ok(RESERVED_NAMES[UNK]),
                        _ => self
                            .words
                            .get(id - RESERVED)
                            .map(String::as_str)
                            .ok_or_else(|| Error::input(format!("id {id} outside vocabulary"))),
                    })
                    .collect::<Result<_>>()?;
                Ok(words.join(" "))
            }
        }
    }
}
