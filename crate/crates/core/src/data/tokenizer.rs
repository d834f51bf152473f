//! Closed-vocabulary word tokenizer.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOT: u32 = 1;
pub const EOT: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<sot>", "<eot>", "<unk>"];

/// Token ids framed by start/end markers and padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub eot_pos: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the framing: SOT first, exactly one EOT at `eot_pos`, padding after.
    pub fn validate(&self) -> Result<()> {
        self.check_markers()?;
        if self.ids[self.eot_pos + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::Tokenize("non-padding token after EOT".into()));
        }
        Ok(())
    }

    /// Checks only the SOT and EOT markers; tokens after EOT are unconstrained.
    pub fn check_markers(&self) -> Result<()> {
        if self.ids.first() != Some(&SOT) {
            return Err(Error::Tokenize("sequence does not start with SOT".into()));
        }
        if self.ids.get(self.eot_pos) != Some(&EOT) {
            return Err(Error::Tokenize(format!("no EOT at position {}", self.eot_pos)));
        }
        if self.ids.iter().filter(|&&t| t == EOT).count() != 1 {
            return Err(Error::Tokenize("expected exactly one EOT".into()));
        }
        Ok(())
    }
}

/// Anything that can turn captions into fixed-length token sequences.
pub trait Tokenizer {
    fn encode(&self, caption: &str) -> TokenSequence;

    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;
}

/// Lowercase whitespace tokenizer over a fixed word list.
#[derive(Clone, Debug)]
pub struct WordTokenizer {
    words: Vec<String>,
    lookup: HashMap<String, u32>,
    max_len: usize,
}

impl WordTokenizer {
    pub fn new<I, S>(words: I, max_len: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        assert!(max_len >= 2, "max_len must hold SOT and EOT");
        let mut list: Vec<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        list.sort();
        list.dedup();
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(list).collect();
        let lookup = words
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, lookup, max_len }
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, caption: &str) -> TokenSequence {
        let body: Vec<u32> = caption
            .split_whitespace()
            .map(|w| *self.lookup.get(&w.to_lowercase()).unwrap_or(&UNK))
            .take(self.max_len - 2)
            .collect();
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(SOT);
        ids.extend(body);
        let eot_pos = ids.len();
        ids.push(EOT);
        ids.resize(self.max_len, PAD);
        TokenSequence { ids, eot_pos }
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }
}
