//! Line-oriented tokenizer file format.
//!
//! ```text
//! bpe-tokenizer v1 <vocab_size>
//! <token>\t<id>        one line per base vocabulary entry
//! merges
//! <left>\t<right>      one line per merge rule, in order
//! added                only for extended tokenizers
//! <token>\t<id>
//! ```
//!
//! Token bytes are escaped: `\\`, `\t`, `\n`, `\r`, and `\xHH` for any other
//! control byte or byte that is not part of valid UTF-8.

use std::fs;
use std::path::Path;

use super::bpe::{BASE_VOCAB, END_OF_TEXT, END_OF_TEXT_ID};
use super::{BpeTokenizer, ExtendedTokenizer, TokenId, Tokenizer};
use crate::error::{Error, Result};

const HEADER: &str = "bpe-tokenizer v1";

pub fn escape_token(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                '\t' => out.push_str("\\t"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                c if (c as u32) < 0x20 || c == '\u{7f}' => {
                    out.push_str(&format!("\\x{:02x}", c as u32))
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            out.push_str(&format!("\\x{b:02x}"));
        }
    }
    out
}

pub fn unescape_token(s: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => out.push(b'\\'),
            Some(b't') => out.push(b'\t'),
            Some(b'n') => out.push(b'\n'),
            Some(b'r') => out.push(b'\r'),
            Some(b'x') => {
                let hex = s.get(i + 2..i + 4).ok_or("truncated \\x escape")?;
                let b = u8::from_str_radix(hex, 16).map_err(|_| format!("bad \\x escape {hex:?}"))?;
                out.push(b);
                i += 4;
                continue;
            }
            other => return Err(format!("unknown escape {:?}", other.map(|&b| b as char))),
        }
        i += 2;
    }
    Ok(out)
}

/// A tokenizer loaded from disk: base-only or extended.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTokenizer {
    Base(BpeTokenizer),
    Extended(ExtendedTokenizer),
}

impl AnyTokenizer {
    /// The extended form; a base tokenizer becomes an extension with no
    /// added tokens.
    pub fn into_extended(self) -> ExtendedTokenizer {
        match self {
            AnyTokenizer::Base(b) => ExtendedTokenizer::new(b),
            AnyTokenizer::Extended(e) => e,
        }
    }

    pub fn base(&self) -> &BpeTokenizer {
        match self {
            AnyTokenizer::Base(b) => b,
            AnyTokenizer::Extended(e) => e.base(),
        }
    }
}

impl Tokenizer for AnyTokenizer {
    fn vocab_size(&self) -> usize {
        match self {
            AnyTokenizer::Base(b) => b.vocab_size(),
            AnyTokenizer::Extended(e) => e.vocab_size(),
        }
    }

    fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        match self {
            AnyTokenizer::Base(b) => b.token_bytes(id),
            AnyTokenizer::Extended(e) => e.token_bytes(id),
        }
    }

    fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        match self {
            AnyTokenizer::Base(b) => b.encode_bytes(text),
            AnyTokenizer::Extended(e) => e.encode_bytes(text),
        }
    }
}

fn write_base(tok: &BpeTokenizer, out: &mut String) {
    out.push_str(&format!("{HEADER} {}\n", tok.vocab_size()));
    for (id, t) in tok.tokens().iter().enumerate() {
        out.push_str(&format!("{}\t{id}\n", escape_token(t)));
    }
    out.push_str("merges\n");
    for (l, r) in tok.merge_strings() {
        out.push_str(&format!("{}\t{}\n", escape_token(l), escape_token(r)));
    }
}

impl BpeTokenizer {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_base(self, &mut out);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_any(path.as_ref())? {
            AnyTokenizer::Base(b) => Ok(b),
            AnyTokenizer::Extended(_) => Err(Error::Format {
                path: path.as_ref().display().to_string(),
                line: 0,
                msg: "expected a base tokenizer, found an extended one".into(),
            }),
        }
    }
}

impl ExtendedTokenizer {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_base(self.base(), &mut out);
        out.push_str("added\n");
        let v = self.base_vocab_size();
        for (i, t) in self.added().iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", escape_token(t), v + i));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads either file flavour; a base file yields zero added tokens.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(load_any(path.as_ref())?.into_extended())
    }
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTokenizer> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse(&text, &path.display().to_string())
}

enum Section {
    Vocab,
    Merges,
    Added,
}

pub(crate) fn parse(text: &str, origin: &str) -> Result<AnyTokenizer> {
    let err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let declared: usize = header
        .strip_prefix(HEADER)
        .map(str::trim)
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| err(1, format!("bad header {header:?}")))?;

    let mut section = Section::Vocab;
    let mut vocab: Vec<Vec<u8>> = Vec::new();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    let mut added: Vec<Vec<u8>> = Vec::new();
    let mut extended = false;

    for (ln, line) in lines {
        match line {
            "" => continue,
            "merges" => {
                section = Section::Merges;
                continue;
            }
            "added" => {
                section = Section::Added;
                extended = true;
                continue;
            }
            _ => {}
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| err(ln, "expected two tab-separated fields".into()))?;
        let a = unescape_token(a).map_err(|m| err(ln, m))?;
        match section {
            Section::Vocab | Section::Added => {
                let id: usize = b.parse().map_err(|_| err(ln, format!("bad id {b:?}")))?;
                let list = if matches!(section, Section::Vocab) { &mut vocab } else { &mut added };
                let expected = match section {
                    Section::Vocab => list.len(),
                    _ => declared + list.len(),
                };
                if id != expected {
                    return Err(err(ln, format!("ids must be dense: expected {expected}, got {id}")));
                }
                list.push(a);
            }
            Section::Merges => {
                let b = unescape_token(b).map_err(|m| err(ln, m))?;
                merges.push((a, b));
            }
        }
    }

    if vocab.len() != declared {
        return Err(err(1, format!("header declares {declared} tokens, found {}", vocab.len())));
    }
    let tok = BpeTokenizer::from_merges(&merges).map_err(|e| err(0, e.to_string()))?;
    if tok.vocab_size() != declared {
        return Err(err(0, format!("{} merges do not give {declared} tokens", merges.len())));
    }
    if vocab.len() < BASE_VOCAB || vocab[END_OF_TEXT_ID as usize] != END_OF_TEXT {
        return Err(err(0, "missing byte alphabet or end-of-text token".into()));
    }
    if let Some((id, _)) = tok.tokens().iter().zip(&vocab).enumerate().find(|(_, (a, b))| a != b) {
        return Err(err(0, format!("vocab entry {id} disagrees with merge rules")));
    }
    if extended {
        let ext = ExtendedTokenizer::with_added(tok, &added).map_err(|e| err(0, e.to_string()))?;
        Ok(AnyTokenizer::Extended(ext))
    } else {
        Ok(AnyTokenizer::Base(tok))
    }
}
