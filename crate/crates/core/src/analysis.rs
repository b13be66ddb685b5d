//! Cosine similarity of learned extension rows to the rows of their
//! constituent subtokens.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::tokenizer::{ExtendedTokenizer, Tokenizer};

pub const EMBEDDING_SIMILARITY_CSV: &str = "similarity_embedding.csv";
pub const HEAD_SIMILARITY_CSV: &str = "similarity_head.csv";

pub fn cosine<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosines over added tokens for one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub epoch: usize,
    pub mean_first: f64,
    /// `None` when no added token has three or more subtokens.
    pub mean_intermediate: Option<f64>,
    pub mean_last: f64,
    pub n_tokens: usize,
    pub n_tokens_with_intermediates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    Embedding,
    Head,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Embedding => "embedding",
            Which::Head => "head",
        })
    }
}

impl FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Which::Embedding),
            "head" => Ok(Which::Head),
            _ => Err(Error::invalid(format!("unknown matrix {s:?} (embedding|head)"))),
        }
    }
}

/// For every added token, compares its extension row with the reference rows
/// of its first subtoken, the mean of its intermediate subtokens (three or
/// more subtokens only) and its last subtoken. Tokens with a zero row are
/// skipped.
pub fn composite_similarity<F: Scalar>(
    extension: &Array2<F>,
    ext: &ExtendedTokenizer,
    reference: &Array2<F>,
) -> Result<SimilarityEntry> {
    if extension.nrows() != ext.n_added() {
        return Err(Error::Shape(format!(
            "{} extension rows for {} added tokens",
            extension.nrows(),
            ext.n_added()
        )));
    }
    let (mut first, mut inter, mut last) = (Vec::new(), Vec::new(), Vec::new());
    for (i, token) in ext.added().iter().enumerate() {
        let ids = ext.base().encode_bytes(token);
        let row = extension.row(i);
        let (Some(&f), Some(&l)) = (ids.first(), ids.last()) else { continue };
        let cf = cosine(row, reference.row(f as usize));
        let cl = cosine(row, reference.row(l as usize));
        let (Ok(cf), Ok(cl)) = (cf, cl) else {
            log::warn!("skipping added token {i}: zero vector");
            continue;
        };
        first.push(cf);
        last.push(cl);
        if ids.len() >= 3 {
            let mut mean = Array1::<F>::zeros(reference.ncols());
            for &id in &ids[1..ids.len() - 1] {
                mean += &reference.row(id as usize);
            }
            mean /= F::from(ids.len() - 2).unwrap();
            if let Ok(c) = cosine(row, mean.view()) {
                inter.push(c);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SimilarityEntry {
        epoch: 0,
        mean_first: mean(&first),
        mean_intermediate: (!inter.is_empty()).then(|| mean(&inter)),
        mean_last: mean(&last),
        n_tokens: first.len(),
        n_tokens_with_intermediates: inter.len(),
    })
}

/// Similarity of the model's embedding or head extension to its original
/// block.
pub fn model_similarity<F: Scalar>(model: &Model<F>, ext: &ExtendedTokenizer, which: Which) -> Result<SimilarityEntry> {
    let m = match which {
        Which::Embedding => &model.embed,
        Which::Head => &model.head,
    };
    composite_similarity(&m.extension, ext, &m.original)
}

/// Trajectory over epochs, written as `epoch,first,intermediate,last`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityReport {
    pub fn push(&mut self, epoch: usize, mut entry: SimilarityEntry) {
        entry.epoch = epoch;
        self.entries.push(entry);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "first", "intermediate", "last"])?;
        for e in &self.entries {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.8}", e.mean_first),
                e.mean_intermediate.map(|v| format!("{v:.8}")).unwrap_or_default(),
                format!("{:.8}", e.mean_last),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
