//! Byte-level BPE tokenizers and vocabulary expansion.
//!
//! A [`BpeTokenizer`] is trained from scratch on a corpus. An
//! [`ExtendedTokenizer`] wraps a frozen base tokenizer and appends whole-word
//! tokens with fresh ids starting at the base vocabulary size. Added tokens
//! carry no merge rules; they are matched on raw text before the base BPE runs.

mod bpe;
mod expand;
mod extended;
mod format;
mod pretok;

pub use bpe::{BpeTokenizer, BASE_VOCAB, END_OF_TEXT, END_OF_TEXT_ID};
pub use expand::{density_report, expand_vocabulary, is_numeric_token, ExpansionConfig, ExpansionReport};
pub use extended::ExtendedTokenizer;
pub use format::{escape_token, load_any, unescape_token, AnyTokenizer};
pub use pretok::pre_tokenize;

use crate::error::{Error, Result};

/// Index into a vocabulary. Original tokens occupy `0..v_orig`, added tokens
/// `v_orig..v_orig + n_added`.
pub type TokenId = u32;

/// Common surface of base and extended tokenizers.
pub trait Tokenizer {
    fn vocab_size(&self) -> usize;

    /// Raw bytes of a token, or `None` for an unknown id.
    fn token_bytes(&self, id: TokenId) -> Option<&[u8]>;

    fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId>;

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(Error::IdOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| Error::InvalidUtf8)
    }

    /// Token strings for display; invalid UTF-8 is replaced lossily.
    fn token_strings(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                self.token_bytes(id)
                    .map(|b| String::from_utf8_lossy(b).into_owned())
                    .unwrap_or_else(|| format!("<{id}>"))
            })
            .collect()
    }
}
