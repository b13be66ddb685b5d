//! Corpus loading and a synthetic code-like corpus generator.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One document per blank-line separated block.
    Plain,
    /// One `query<TAB>answer` record per line.
    Paired,
}

impl FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "paired" => Ok(Self::Paired),
            _ => Err(Error::invalid(format!("unknown corpus format {s:?} (plain|paired)"))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Paired => "paired",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    /// Training texts in file order.
    pub documents: Vec<String>,
    /// Original query/answer fields for paired corpora.
    pub pairs: Option<Vec<(String, String)>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Training text for a query/answer record: the query, a newline, the answer.
pub fn pair_text(query: &str, answer: &str) -> String {
    format!("{query}\n{answer}")
}

/// Paired answers may encode newlines and tabs as `\n` and `\t`.
fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

pub fn parse_corpus(text: &str, format: CorpusFormat, origin: &str) -> Result<Corpus> {
    let corpus = match format {
        CorpusFormat::Plain => {
            let mut documents = Vec::new();
            let mut current: Vec<&str> = Vec::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !current.is_empty() {
                        documents.push(current.join("\n"));
                        current.clear();
                    }
                } else {
                    current.push(line);
                }
            }
            if !current.is_empty() {
                documents.push(current.join("\n"));
            }
            Corpus { documents, pairs: None }
        }
        CorpusFormat::Paired => {
            let mut pairs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (q, a) = line
                    .split_once('\t')
                    .filter(|(q, a)| !q.is_empty() && !a.is_empty() && !a.contains('\t'))
                    .ok_or_else(|| Error::Format {
                        path: origin.to_string(),
                        line: i + 1,
                        msg: "expected query<TAB>answer".into(),
                    })?;
                pairs.push((unescape_field(q), unescape_field(a)));
            }
            Corpus {
                documents: pairs.iter().map(|(q, a)| pair_text(q, a)).collect(),
                pairs: Some(pairs),
            }
        }
    };
    if corpus.is_empty() {
        log::warn!("corpus {origin} is empty");
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, format, &path.display().to_string())
}

/// Writes documents as blank-line separated blocks.
pub fn write_plain(docs: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(d);
        out.push_str("\n\n");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Domain identifiers, most frequent first.
const DOMAIN_WORDS: [&str; 24] = [
    "numpy",
    "dataframe",
    "eratosthenes",
    "linspace",
    "matplotlib",
    "histogram",
    "tokenizer",
    "gradient",
    "optimizer",
    "regression",
    "dictionary",
    "enumerate",
    "isinstance",
    "accumulate",
    "scheduler",
    "transformer",
    "attention",
    "vocabulary",
    "embedding",
    "normalize",
    "quantile",
    "covariance",
    "interpolate",
    "permutation",
];

const PLAIN_WORDS: [&str; 16] = [
    "x", "y", "data", "value", "result", "items", "count", "total", "index", "row", "size", "name", "key", "left",
    "right", "out",
];

fn domain_word(rng: &mut ChaCha8Rng) -> &'static str {
    // Zipf-like weights so the ranking of identifiers is stable
    let weights: Vec<f64> = (0..DOMAIN_WORDS.len()).map(|i| 1.0 / (i as f64 + 2.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (w, word) in weights.iter().zip(DOMAIN_WORDS) {
        if r < *w {
            return word;
        }
        r -= w;
    }
    DOMAIN_WORDS[DOMAIN_WORDS.len() - 1]
}

fn plain(rng: &mut ChaCha8Rng) -> &'static str {
    PLAIN_WORDS.choose(rng).expect("non-empty")
}

/// One pseudo-code function mixing domain identifiers into common syntax.
fn document(rng: &mut ChaCha8Rng) -> String {
    let f = domain_word(rng);
    let g = domain_word(rng);
    let a = plain(rng);
    let b = plain(rng);
    let mut lines = vec![format!("def {f}_{a}({b}, {g}):")];
    let n_lines = rng.random_range(2..5);
    for _ in 0..n_lines {
        let w = domain_word(rng);
        let v = domain_word(rng);
        let line = match rng.random_range(0..6) {
            0 => format!("    {a} = {w}.{v}({b})"),
            1 => format!("    for {b} in {w}({a}):"),
            2 => format!("    if isinstance({b}, {w}):"),
            3 => format!("    {b} = {w}({a}, {})", rng.random_range(0..100)),
            4 => format!("    # compute the {w} of {a} with {v}"),
            _ => format!("    {a} += {w}[{b}]"),
        };
        lines.push(line);
    }
    lines.push(format!("    return {a}"));
    lines.join("\n")
}

/// Deterministic synthetic corpus of `n_docs` code-like documents.
pub fn generate_corpus(n_docs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs).map(|_| document(&mut rng)).collect()
}
