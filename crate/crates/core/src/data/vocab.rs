//! Closed word-level vocabulary with fixed special and sentinel ids.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const SENTINEL_BASE: usize = 4;
pub const NUM_SENTINELS: usize = 32;
/// First id assigned to an ordinary word.
pub const FIRST_WORD: usize = SENTINEL_BASE + NUM_SENTINELS;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];

pub fn sentinel(i: usize) -> usize {
    debug_assert!(i < NUM_SENTINELS);
    SENTINEL_BASE + i
}

pub fn is_sentinel(id: usize) -> bool {
    (SENTINEL_BASE..FIRST_WORD).contains(&id)
}

/// Ids below [`FIRST_WORD`]: padding, markers and sentinels.
pub fn is_special(id: usize) -> bool {
    id < FIRST_WORD
}

/// `[CLS] words [SEP]` padded with `[PAD]` to `max_len`.
pub fn wrap_ids(words: &[usize], max_len: usize) -> Result<EncodedText> {
    let len = words.len() + 2;
    if len > max_len {
        return Err(Error::SequenceOverflow { len, max_len });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(words);
    ids.push(SEP);
    let mut mask = alloc::vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    Ok(EncodedText { ids, mask })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

/// Token ids of one sentence with its attention mask (true = real token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedText {
    /// Number of non-padding positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Vocabulary {
    /// Specials, then sentinels, then the lowercase word set in sorted order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = corpus
            .into_iter()
            .flat_map(|s| s.split_whitespace())
            .map(|w| w.to_lowercase())
            .collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..NUM_SENTINELS).map(|i| format!("<extra_{i}>")));
        tokens.extend(words);
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of ordinary words.
    pub fn num_words(&self) -> usize {
        self.tokens.len() - FIRST_WORD
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.into()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids of `text`, without markers.
    pub fn word_ids(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    /// `[CLS] w1 .. wn [SEP]` padded with `[PAD]` to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<EncodedText> {
        let words = self.word_ids(text)?;
        self.wrap(&words, max_len)
    }

    /// Wraps already-tokenized ids with markers and padding.
    pub fn wrap(&self, words: &[usize], max_len: usize) -> Result<EncodedText> {
        wrap_ids(words, max_len)
    }

    /// Space-joined tokens, skipping `[PAD]`, `[CLS]` and `[SEP]`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | CLS | SEP))
            .filter_map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}
