use std::collections::{HashMap, HashSet};

use log::{info, warn};

use super::{BpeTokenizer, ExtendedTokenizer, TokenId, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionConfig {
    /// Number of tokens to add.
    pub n_add: usize,
    /// Vocabulary size of the fresh tokenizer trained on the domain corpus.
    /// `None` uses the base vocabulary size.
    pub fresh_vocab_size: Option<usize>,
}

impl ExpansionConfig {
    pub fn new(n_add: usize) -> Self {
        Self {
            n_add,
            fresh_vocab_size: None,
        }
    }
}

/// Bookkeeping for one expansion run: every candidate the fresh tokenizer
/// produced, and which filter removed it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpansionReport {
    /// (token, occurrence count) for every fresh token seen in the corpus.
    pub candidates: Vec<(Vec<u8>, u64)>,
    pub dropped_numeric: Vec<Vec<u8>>,
    pub dropped_substring: Vec<Vec<u8>>,
    pub dropped_duplicate: Vec<Vec<u8>>,
    /// Survivors sorted by count descending, then token string ascending.
    pub ranked: Vec<(Vec<u8>, u64)>,
    pub added: Vec<Vec<u8>>,
}

/// True when the token is ASCII digits after stripping one optional leading
/// space.
pub fn is_numeric_token(token: &[u8]) -> bool {
    let body = token.strip_prefix(b" ").unwrap_or(token);
    !body.is_empty() && body.iter().all(u8::is_ascii_digit)
}

/// Adds the most frequent domain tokens to a frozen base tokenizer.
///
/// Trains a fresh BPE tokenizer on `corpus`, counts how often each of its
/// tokens occurs when the corpus is encoded with it, drops numeric tokens,
/// proper substrings of base tokens and exact base tokens, and appends the
/// `n_add` most frequent survivors.
pub fn expand_vocabulary<S: AsRef<str>>(
    base: &BpeTokenizer,
    corpus: &[S],
    config: &ExpansionConfig,
) -> Result<(ExtendedTokenizer, ExpansionReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.n_add == 0 {
        return Err(Error::invalid("n_add must be at least 1"));
    }
    let fresh_size = config.fresh_vocab_size.unwrap_or(base.vocab_size());
    let fresh = BpeTokenizer::train(corpus, fresh_size)?;

    let mut counts: HashMap<TokenId, u64> = HashMap::new();
    for doc in corpus {
        for id in fresh.encode(doc.as_ref()) {
            *counts.entry(id).or_default() += 1;
        }
    }
    let mut candidates: Vec<(Vec<u8>, u64)> = counts
        .into_iter()
        .map(|(id, n)| (fresh.tokens()[id as usize].clone(), n))
        .collect();
    candidates.sort();

    let base_substrings = substrings_of(base);
    let mut report = ExpansionReport {
        candidates: candidates.clone(),
        ..Default::default()
    };
    let mut survivors = Vec::new();
    for (token, n) in candidates {
        if is_numeric_token(&token) {
            report.dropped_numeric.push(token);
        } else if base.id_of(&token).is_some() {
            report.dropped_duplicate.push(token);
        } else if base_substrings.contains(token.as_slice()) {
            report.dropped_substring.push(token);
        } else {
            survivors.push((token, n));
        }
    }
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    report.ranked = survivors.clone();
    report.added = survivors
        .into_iter()
        .take(config.n_add)
        .map(|(t, _)| t)
        .collect();

    if report.added.is_empty() {
        warn!("vocabulary expansion: no candidate survived filtering");
    } else if report.added.len() < config.n_add {
        warn!(
            "vocabulary expansion: only {} of {} requested tokens survived filtering",
            report.added.len(),
            config.n_add
        );
    }
    info!(
        "expansion: {} candidates, dropped {} numeric / {} substring / {} duplicate, added {}",
        report.candidates.len(),
        report.dropped_numeric.len(),
        report.dropped_substring.len(),
        report.dropped_duplicate.len(),
        report.added.len()
    );
    let ext = ExtendedTokenizer::with_added(base.clone(), &report.added)?;
    Ok((ext, report))
}

/// Every proper substring of every regular base token.
fn substrings_of(base: &BpeTokenizer) -> HashSet<&[u8]> {
    let mut set = HashSet::new();
    for (id, t) in base.tokens().iter().enumerate() {
        if base.is_special(id as TokenId) {
            continue;
        }
        for i in 0..t.len() {
            for j in i + 1..=t.len() {
                if j - i < t.len() {
                    set.insert(&t[i..j]);
                }
            }
        }
    }
    set
}

/// Logs documents whose extended encoding is longer than the base encoding and
/// returns (mean base length, mean extended length).
pub fn density_report<S: AsRef<str>>(ext: &ExtendedTokenizer, corpus: &[S]) -> (f64, f64) {
    let (mut base_total, mut ext_total) = (0usize, 0usize);
    for (i, doc) in corpus.iter().enumerate() {
        let b = ext.base().encode(doc.as_ref()).len();
        let e = ext.encode(doc.as_ref()).len();
        if e > b {
            warn!("document {i}: extended encoding longer than base ({e} > {b})");
        }
        base_total += b;
        ext_total += e;
    }
    let n = corpus.len().max(1) as f64;
    (base_total as f64 / n, ext_total as f64 / n)
}
