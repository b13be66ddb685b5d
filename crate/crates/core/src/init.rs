//! Initialisation of the embedding and head extension blocks.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::tokenizer::{BpeTokenizer, ExtendedTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingInit {
    Random,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadInit {
    Random,
    CopyFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InitStrategy {
    pub embedding: EmbeddingInit,
    pub head: HeadInit,
}

impl InitStrategy {
    pub const fn new(embedding: EmbeddingInit, head: HeadInit) -> Self {
        Self { embedding, head }
    }
}

impl fmt::Display for EmbeddingInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingInit::Random => "random",
            EmbeddingInit::Mean => "mean",
        })
    }
}

impl FromStr for EmbeddingInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::invalid(format!("unknown embedding init {s:?} (random|mean)"))),
        }
    }
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInit::Random => "random",
            HeadInit::CopyFirst => "copy-first",
        })
    }
}

impl FromStr for HeadInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "copy-first" | "copy_first" => Ok(Self::CopyFirst),
            _ => Err(Error::invalid(format!("unknown head init {s:?} (random|copy-first)"))),
        }
    }
}

/// Population standard deviation of all entries.
pub fn empirical_sigma<F: Scalar>(m: &Array2<F>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.len() as f64;
    let mean = m.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / n;
    let var = m.iter().map(|x| (x.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// `n_rows × d_model` matrix with i.i.d. normal(0, sigma²) entries.
pub fn init_random_rows<F: Scalar>(n_rows: usize, d_model: usize, seed: u64, sigma: f64) -> Result<Array2<F>> {
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array2::from_shape_fn((n_rows, d_model), |_| F::from(dist.sample(&mut rng)).unwrap()))
}

fn base_split(token: &[u8], base: &BpeTokenizer) -> Result<Vec<u32>> {
    if token.is_empty() {
        return Err(Error::invalid("empty token string"));
    }
    Ok(base.encode_bytes(token))
}

/// Mean of the original rows of the token's base-tokenizer split, summed left
/// to right and divided by the count.
pub fn init_mean_embedding<F: Scalar>(token: &[u8], base: &BpeTokenizer, original: &Array2<F>) -> Result<Array1<F>> {
    let ids = base_split(token, base)?;
    let mut acc = Array1::zeros(original.ncols());
    for &id in &ids {
        let row = original.row(id as usize);
        acc.zip_mut_with(&row, |a, &b| *a += b);
    }
    let k = F::from(ids.len()).unwrap();
    acc.mapv_inplace(|x| x / k);
    Ok(acc)
}

/// Copy of the original head row of the token's first base subtoken.
pub fn init_head_copy_first<F: Scalar>(token: &[u8], base: &BpeTokenizer, original: &Array2<F>) -> Result<Array1<F>> {
    let ids = base_split(token, base)?;
    Ok(original.row(ids[0] as usize).to_owned())
}

/// Fills the model's extension blocks for every added token of `ext`.
/// Random rows use the empirical sigma of the matching original block; the
/// head draws from `seed + 1`.
pub fn initialize_extension<F: Scalar>(
    model: &mut Model<F>,
    ext: &ExtendedTokenizer,
    strategy: InitStrategy,
    seed: u64,
) -> Result<()> {
    if ext.base_vocab_size() != model.config.v_orig {
        return Err(Error::invalid(format!(
            "tokenizer base vocabulary {} does not match model v_orig {}",
            ext.base_vocab_size(),
            model.config.v_orig
        )));
    }
    let n = ext.n_added();
    let d = model.config.d_model;
    let embed = match strategy.embedding {
        EmbeddingInit::Random => init_random_rows(n, d, seed, empirical_sigma(&model.embed.original))?,
        EmbeddingInit::Mean => stack(ext, d, |t| init_mean_embedding(t, ext.base(), &model.embed.original))?,
    };
    let head = match strategy.head {
        HeadInit::Random => init_random_rows(n, d, seed.wrapping_add(1), empirical_sigma(&model.head.original))?,
        HeadInit::CopyFirst => stack(ext, d, |t| init_head_copy_first(t, ext.base(), &model.head.original))?,
    };
    model.set_extension(embed, head)
}

fn stack<F: Scalar>(
    ext: &ExtendedTokenizer,
    d: usize,
    row: impl Fn(&[u8]) -> Result<Array1<F>>,
) -> Result<Array2<F>> {
    let mut out = Array2::zeros((ext.n_added(), d));
    for (i, t) in ext.added().iter().enumerate() {
        out.row_mut(i).assign(&row(t)?);
    }
    Ok(out)
}
