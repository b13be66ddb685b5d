use std::collections::HashMap;

use super::{BpeTokenizer, TokenId, Tokenizer};
use crate::error::{Error, Result};

/// A frozen base tokenizer plus whole-word tokens with ids from
/// `base.vocab_size()` upwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedTokenizer {
    base: BpeTokenizer,
    added: Vec<Vec<u8>>,
    // first byte -> indices into `added`, longest string first
    by_first_byte: HashMap<u8, Vec<usize>>,
}

impl ExtendedTokenizer {
    /// Wraps `base` with no added tokens.
    pub fn new(base: BpeTokenizer) -> Self {
        Self {
            base,
            added: Vec::new(),
            by_first_byte: HashMap::new(),
        }
    }

    /// Appends tokens in order. Rejects empty strings, strings already in the
    /// base vocabulary, substrings of base tokens, and duplicates.
    pub fn with_added<I, S>(base: BpeTokenizer, added: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut tok = Self::new(base);
        for s in added {
            tok.push(s.as_ref())?;
        }
        Ok(tok)
    }

    fn push(&mut self, token: &[u8]) -> Result<TokenId> {
        let shown = || String::from_utf8_lossy(token).into_owned();
        if token.is_empty() {
            return Err(Error::invalid("added token is empty"));
        }
        if self.base.id_of(token).is_some() {
            return Err(Error::invalid(format!("added token {:?} is in the base vocabulary", shown())));
        }
        if self.added.iter().any(|a| a == token) {
            return Err(Error::invalid(format!("added token {:?} is duplicated", shown())));
        }
        if self
            .base
            .tokens()
            .iter()
            .enumerate()
            .any(|(id, t)| !self.base.is_special(id as TokenId) && contains(t, token))
        {
            return Err(Error::invalid(format!(
                "added token {:?} is a substring of a base token",
                shown()
            )));
        }
        let idx = self.added.len();
        self.added.push(token.to_vec());
        let bucket = self.by_first_byte.entry(token[0]).or_default();
        bucket.push(idx);
        let added = &self.added;
        bucket.sort_by(|&a, &b| added[b].len().cmp(&added[a].len()).then(a.cmp(&b)));
        Ok((self.base.vocab_size() + idx) as TokenId)
    }

    pub fn base(&self) -> &BpeTokenizer {
        &self.base
    }

    /// Added token strings in id order.
    pub fn added(&self) -> &[Vec<u8>] {
        &self.added
    }

    pub fn n_added(&self) -> usize {
        self.added.len()
    }

    /// Size of the original vocabulary; ids at or above it are added tokens.
    pub fn base_vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    pub fn is_added(&self, id: TokenId) -> bool {
        (id as usize) >= self.base.vocab_size() && (id as usize) < self.vocab_size()
    }

    /// Id of an added token string.
    pub fn added_id(&self, token: &[u8]) -> Option<TokenId> {
        self.added
            .iter()
            .position(|a| a == token)
            .map(|i| (self.base.vocab_size() + i) as TokenId)
    }

    fn match_at(&self, text: &[u8], pos: usize) -> Option<usize> {
        let bucket = self.by_first_byte.get(&text[pos])?;
        bucket
            .iter()
            .copied()
            .find(|&i| text[pos..].starts_with(&self.added[i]))
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    needle.len() <= haystack.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

impl Tokenizer for ExtendedTokenizer {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size() + self.added.len()
    }

    fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        let v = self.base.vocab_size();
        if (id as usize) < v {
            self.base.token_bytes(id)
        } else {
            self.added.get(id as usize - v).map(Vec::as_slice)
        }
    }

    /// Greedy longest-match scan for added tokens over the raw text; the gaps
    /// between matches go through the base tokenizer.
    fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        if self.added.is_empty() {
            return self.base.encode_bytes(text);
        }
        let mut out = Vec::new();
        let mut span_start = 0;
        let mut pos = 0;
        while pos < text.len() {
            match self.match_at(text, pos) {
                Some(idx) => {
                    if span_start < pos {
                        out.extend(self.base.encode_bytes(&text[span_start..pos]));
                    }
                    out.push((self.base.vocab_size() + idx) as TokenId);
                    pos += self.added[idx].len();
                    span_start = pos;
                }
                None => pos += 1,
            }
        }
        if span_start < text.len() {
            out.extend(self.base.encode_bytes(&text[span_start..]));
        }
        out
    }
}
