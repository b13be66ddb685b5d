use std::collections::HashMap;

use super::pretok::pre_tokenize;
use super::{TokenId, Tokenizer};
use crate::error::{Error, Result};

/// Surface string of the reserved end-of-text token. It is never produced by
/// [`Tokenizer::encode`].
pub const END_OF_TEXT: &[u8] = b"<|endoftext|>";
/// Id of the reserved end-of-text token.
pub const END_OF_TEXT_ID: TokenId = 256;
/// Byte alphabet plus the end-of-text token.
pub const BASE_VOCAB: usize = 257;

/// Byte-level BPE tokenizer.
///
/// Ids `0..256` are single bytes (id == byte value), id 256 is the reserved
/// end-of-text token, and id `257 + r` is the token created by merge rule `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeTokenizer {
    tokens: Vec<Vec<u8>>,
    vocab: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), u32>,
}

impl Default for BpeTokenizer {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl BpeTokenizer {
    /// Tokenizer with the byte alphabet and no merges.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(END_OF_TEXT.to_vec());
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            vocab,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Builds a tokenizer by replaying merge rules in order.
    pub fn from_merges<L, R>(merges: &[(L, R)]) -> Result<Self>
    where
        L: AsRef<[u8]>,
        R: AsRef<[u8]>,
    {
        let mut tok = Self::byte_level();
        for (left, right) in merges {
            let (left, right) = (left.as_ref(), right.as_ref());
            let l = tok.lookup(left)?;
            let r = tok.lookup(right)?;
            tok.push_merge(l, r)?;
        }
        Ok(tok)
    }

    fn lookup(&self, bytes: &[u8]) -> Result<TokenId> {
        self.vocab.get(bytes).copied().ok_or_else(|| {
            Error::invalid(format!(
                "merge part {:?} is not in the vocabulary",
                String::from_utf8_lossy(bytes)
            ))
        })
    }

    pub(crate) fn push_merge(&mut self, left: TokenId, right: TokenId) -> Result<TokenId> {
        let mut joined = self.tokens[left as usize].clone();
        joined.extend_from_slice(&self.tokens[right as usize]);
        if self.vocab.contains_key(&joined) {
            return Err(Error::invalid(format!(
                "merge result {:?} already in vocabulary",
                String::from_utf8_lossy(&joined)
            )));
        }
        let id = self.tokens.len() as TokenId;
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        self.vocab.insert(joined.clone(), id);
        self.tokens.push(joined);
        Ok(id)
    }

    /// Trains a tokenizer with at most `target_vocab_size` tokens.
    ///
    /// The most frequent adjacent pair inside a pre-token chunk is merged at
    /// each step. Count ties go to the lexicographically smallest
    /// concatenation, then the smallest left part. Pairs whose concatenation
    /// already exists are never merged.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if target_vocab_size < BASE_VOCAB {
            return Err(Error::invalid(format!(
                "target_vocab_size must be at least {BASE_VOCAB}, got {target_vocab_size}"
            )));
        }

        let mut chunk_counts: HashMap<&[u8], u64> = HashMap::new();
        for doc in corpus {
            let bytes = doc.as_ref().as_bytes();
            for r in pre_tokenize(bytes) {
                *chunk_counts.entry(&bytes[r]).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<TokenId>, u64)> = chunk_counts
            .into_iter()
            .map(|(chunk, n)| (chunk.iter().map(|&b| b as TokenId).collect(), n))
            .collect();
        words.sort();

        let mut tok = Self::byte_level();
        while tok.vocab_size() < target_vocab_size {
            let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&((l, r), _)| !tok.vocab.contains_key(&tok.concat(l, r)))
                .max_by(|&(pa, ca), &(pb, cb)| {
                    ca.cmp(&cb)
                        .then_with(|| tok.concat(pb.0, pb.1).cmp(&tok.concat(pa.0, pa.1)))
                        .then_with(|| tok.tokens[pb.0 as usize].cmp(&tok.tokens[pa.0 as usize]))
                });
            let Some(((l, r), _)) = best else { break };
            let id = tok.push_merge(l, r)?;
            for (w, _) in words.iter_mut() {
                merge_in_place(w, l, r, id);
            }
        }
        Ok(tok)
    }

    fn concat(&self, l: TokenId, r: TokenId) -> Vec<u8> {
        let mut v = self.tokens[l as usize].clone();
        v.extend_from_slice(&self.tokens[r as usize]);
        v
    }

    /// Merge rules in application order, as token ids.
    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Merge rules in application order, as byte strings.
    pub fn merge_strings(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.merges
            .iter()
            .map(|&(l, r)| (self.tokens[l as usize].as_slice(), self.tokens[r as usize].as_slice()))
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.vocab.get(bytes).copied()
    }

    /// All token byte strings indexed by id.
    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    /// True for the reserved end-of-text id, which never appears in encodings.
    pub fn is_special(&self, id: TokenId) -> bool {
        id == END_OF_TEXT_ID
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&rank| (rank, p[0], p[1])))
                .min();
            let Some((rank, l, r)) = best else { break };
            let merged = BASE_VOCAB as TokenId + rank;
            merge_in_place(&mut ids, l, r, merged);
        }
        out.extend_from_slice(&ids);
    }
}

fn merge_in_place(ids: &mut Vec<TokenId>, l: TokenId, r: TokenId, merged: TokenId) {
    if ids.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

impl Tokenizer for BpeTokenizer {
    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for r in pre_tokenize(text) {
            self.encode_chunk(&text[r], &mut out);
        }
        out
    }
}
