//! Small decoder-only transformer with an untied, partitioned embedding table
//! and head.
//!
//! Block recurrence: `H' = H + FFN(LN2(H + Attn(LN1(H))))`, followed by a
//! final layer norm and `logits = LN_f(H_n) · [W_orig; W_ext]ᵀ`. Positions use
//! learned absolute embeddings.
//!
//! Every parameter is a 2-D array addressed by a [`ParamId`]; vectors are
//! stored as `1 × n`. Gradients are computed by hand in [`backward`](GradientTape::backward)
//! and only for the parameters the caller asks for.

mod backward;
mod checkpoint;
mod forward;
mod grad;
mod lora;
pub mod ops;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{ForwardTrace, GradientTape};
pub use grad::{Gradients, TrainableSet};
pub use lora::LoraAdapter;
pub use ops::{log_softmax_rows, softmax_rows};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Floating-point element type of a model. Implemented for `f32` (training)
/// and `f64` (gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn to_le_bytes_vec(self) -> Vec<u8>;
}

impl Scalar for f32 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Original vocabulary size.
    pub v_orig: usize,
    /// Number of added tokens.
    pub v_ext: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("v_orig", self.v_orig),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.v_orig + self.v_ext
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count (without adapters).
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d;
        2 * self.vocab_size() * d + self.max_seq * d + self.n_layers * per_block + 2 * d
    }
}

/// Matrices inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    B1,
    W2,
    B2,
}

impl BlockParam {
    pub const ALL: [BlockParam; 12] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::Wq,
        BlockParam::Wk,
        BlockParam::Wv,
        BlockParam::Wo,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::W1,
        BlockParam::B1,
        BlockParam::W2,
        BlockParam::B2,
    ];

    /// Attention and feed-forward weight matrices; the LoRA targets.
    pub const LINEAR: [BlockParam; 6] = [
        BlockParam::Wq,
        BlockParam::Wk,
        BlockParam::Wv,
        BlockParam::Wo,
        BlockParam::W1,
        BlockParam::W2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::Wq => "attn.wq",
            BlockParam::Wk => "attn.wk",
            BlockParam::Wv => "attn.wv",
            BlockParam::Wo => "attn.wo",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::W1 => "ffn.w1",
            BlockParam::B1 => "ffn.b1",
            BlockParam::W2 => "ffn.w2",
            BlockParam::B2 => "ffn.b2",
        }
    }

    pub fn is_linear(self) -> bool {
        Self::LINEAR.contains(&self)
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraPart {
    A,
    B,
}

/// Stable address of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    EmbedOriginal,
    EmbedExtension,
    Position,
    Block(usize, BlockParam),
    FinalNormGain,
    FinalNormBias,
    HeadOriginal,
    HeadExtension,
    Lora(usize, BlockParam, LoraPart),
}

impl ParamId {
    /// Checkpoint tensor name, e.g. `embed.extension` or `block.0.attn.wq`.
    pub fn name(&self) -> String {
        match self {
            ParamId::EmbedOriginal => "embed.original".into(),
            ParamId::EmbedExtension => "embed.extension".into(),
            ParamId::Position => "embed.position".into(),
            ParamId::Block(i, p) => format!("block.{i}.{}", p.name()),
            ParamId::FinalNormGain => "final_norm.gain".into(),
            ParamId::FinalNormBias => "final_norm.bias".into(),
            ParamId::HeadOriginal => "head.original".into(),
            ParamId::HeadExtension => "head.extension".into(),
            ParamId::Lora(i, p, part) => {
                let part = match part {
                    LoraPart::A => "A",
                    LoraPart::B => "B",
                };
                format!("lora.block.{i}.{}.{part}", p.name())
            }
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "embed.original" => return Some(ParamId::EmbedOriginal),
            "embed.extension" => return Some(ParamId::EmbedExtension),
            "embed.position" => return Some(ParamId::Position),
            "final_norm.gain" => return Some(ParamId::FinalNormGain),
            "final_norm.bias" => return Some(ParamId::FinalNormBias),
            "head.original" => return Some(ParamId::HeadOriginal),
            "head.extension" => return Some(ParamId::HeadExtension),
            _ => {}
        }
        if let Some(rest) = name.strip_prefix("lora.block.") {
            let (i, rest) = rest.split_once('.')?;
            let (param, part) = rest.rsplit_once('.')?;
            let part = match part {
                "A" => LoraPart::A,
                "B" => LoraPart::B,
                _ => return None,
            };
            return Some(ParamId::Lora(i.parse().ok()?, BlockParam::from_name(param)?, part));
        }
        let rest = name.strip_prefix("block.")?;
        let (i, param) = rest.split_once('.')?;
        Some(ParamId::Block(i.parse().ok()?, BlockParam::from_name(param)?))
    }

    /// Block index for block and adapter parameters.
    pub fn layer(&self) -> Option<usize> {
        match self {
            ParamId::Block(i, _) | ParamId::Lora(i, _, _) => Some(*i),
            _ => None,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Embedding table or head split into a frozen-by-default original block
/// (`v_orig` rows) and an extension block (`v_ext` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMatrix<F> {
    pub original: Array2<F>,
    pub extension: Array2<F>,
}

impl<F: Scalar> PartitionedMatrix<F> {
    /// Row for a full-vocabulary id.
    pub fn row(&self, id: TokenId) -> ndarray::ArrayView1<'_, F> {
        let v = self.original.nrows();
        if (id as usize) < v {
            self.original.row(id as usize)
        } else {
            self.extension.row(id as usize - v)
        }
    }

    /// Both blocks stacked into one `(v_orig + v_ext) × d` matrix.
    pub fn stacked(&self) -> Array2<F> {
        ndarray::concatenate(ndarray::Axis(0), &[self.original.view(), self.extension.view()])
            .expect("blocks share width")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_gain: Array2<F>,
    pub ln1_bias: Array2<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_gain: Array2<F>,
    pub ln2_bias: Array2<F>,
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub w2: Array2<F>,
    pub b2: Array2<F>,
    /// Low-rank adapters keyed by the wrapped matrix.
    pub lora: std::collections::BTreeMap<BlockParam, LoraAdapter<F>>,
}

impl<F: Scalar> Block<F> {
    pub fn get(&self, p: BlockParam) -> &Array2<F> {
        match p {
            BlockParam::Ln1Gain => &self.ln1_gain,
            BlockParam::Ln1Bias => &self.ln1_bias,
            BlockParam::Wq => &self.wq,
            BlockParam::Wk => &self.wk,
            BlockParam::Wv => &self.wv,
            BlockParam::Wo => &self.wo,
            BlockParam::Ln2Gain => &self.ln2_gain,
            BlockParam::Ln2Bias => &self.ln2_bias,
            BlockParam::W1 => &self.w1,
            BlockParam::B1 => &self.b1,
            BlockParam::W2 => &self.w2,
            BlockParam::B2 => &self.b2,
        }
    }

    pub fn get_mut(&mut self, p: BlockParam) -> &mut Array2<F> {
        match p {
            BlockParam::Ln1Gain => &mut self.ln1_gain,
            BlockParam::Ln1Bias => &mut self.ln1_bias,
            BlockParam::Wq => &mut self.wq,
            BlockParam::Wk => &mut self.wk,
            BlockParam::Wv => &mut self.wv,
            BlockParam::Wo => &mut self.wo,
            BlockParam::Ln2Gain => &mut self.ln2_gain,
            BlockParam::Ln2Bias => &mut self.ln2_bias,
            BlockParam::W1 => &mut self.w1,
            BlockParam::B1 => &mut self.b1,
            BlockParam::W2 => &mut self.w2,
            BlockParam::B2 => &mut self.b2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub embed: PartitionedMatrix<F>,
    pub position: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm_gain: Array2<F>,
    pub final_norm_bias: Array2<F>,
    pub head: PartitionedMatrix<F>,
}

const INIT_STD: f64 = 0.02;

fn normal_matrix<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| F::from(dist.sample(rng)).unwrap())
}

/// Deterministic GPT-2 style initialisation: normal(0, 0.02) weights, residual
/// output projections scaled by `1/sqrt(2 n_layers)`, unit norm gains, zero
/// biases.
pub fn init_base_model<F: Scalar>(config: ModelConfig, seed: u64) -> Result<Model<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let embed_orig = normal_matrix(&mut rng, config.v_orig, d, INIT_STD);
    let embed_ext = normal_matrix(&mut rng, config.v_ext, d, INIT_STD);
    let position = normal_matrix(&mut rng, config.max_seq, d, INIT_STD);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(Block {
            ln1_gain: Array2::ones((1, d)),
            ln1_bias: Array2::zeros((1, d)),
            wq: normal_matrix(&mut rng, d, d, INIT_STD),
            wk: normal_matrix(&mut rng, d, d, INIT_STD),
            wv: normal_matrix(&mut rng, d, d, INIT_STD),
            wo: normal_matrix(&mut rng, d, d, resid_std),
            ln2_gain: Array2::ones((1, d)),
            ln2_bias: Array2::zeros((1, d)),
            w1: normal_matrix(&mut rng, d, config.d_ff, INIT_STD),
            b1: Array2::zeros((1, config.d_ff)),
            w2: normal_matrix(&mut rng, config.d_ff, d, resid_std),
            b2: Array2::zeros((1, d)),
            lora: Default::default(),
        });
    }
    let head_orig = normal_matrix(&mut rng, config.v_orig, d, INIT_STD);
    let head_ext = normal_matrix(&mut rng, config.v_ext, d, INIT_STD);
    Ok(Model {
        config,
        embed: PartitionedMatrix {
            original: embed_orig,
            extension: embed_ext,
        },
        position,
        blocks,
        final_norm_gain: Array2::ones((1, d)),
        final_norm_bias: Array2::zeros((1, d)),
        head: PartitionedMatrix {
            original: head_orig,
            extension: head_ext,
        },
    })
}

impl<F: Scalar> Model<F> {
    /// Every parameter id, in checkpoint order. Extension blocks are listed
    /// only when `v_ext > 0`.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::EmbedOriginal];
        if self.config.v_ext > 0 {
            ids.push(ParamId::EmbedExtension);
        }
        ids.push(ParamId::Position);
        for (i, b) in self.blocks.iter().enumerate() {
            ids.extend(BlockParam::ALL.iter().map(|&p| ParamId::Block(i, p)));
            for &p in b.lora.keys() {
                ids.push(ParamId::Lora(i, p, LoraPart::A));
                ids.push(ParamId::Lora(i, p, LoraPart::B));
            }
        }
        ids.extend([ParamId::FinalNormGain, ParamId::FinalNormBias, ParamId::HeadOriginal]);
        if self.config.v_ext > 0 {
            ids.push(ParamId::HeadExtension);
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        Some(match id {
            ParamId::EmbedOriginal => &self.embed.original,
            ParamId::EmbedExtension => &self.embed.extension,
            ParamId::Position => &self.position,
            ParamId::Block(i, p) => self.blocks.get(i)?.get(p),
            ParamId::FinalNormGain => &self.final_norm_gain,
            ParamId::FinalNormBias => &self.final_norm_bias,
            ParamId::HeadOriginal => &self.head.original,
            ParamId::HeadExtension => &self.head.extension,
            ParamId::Lora(i, p, part) => {
                let a = self.blocks.get(i)?.lora.get(&p)?;
                match part {
                    LoraPart::A => &a.a,
                    LoraPart::B => &a.b,
                }
            }
        })
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Array2<F>> {
        Some(match id {
            ParamId::EmbedOriginal => &mut self.embed.original,
            ParamId::EmbedExtension => &mut self.embed.extension,
            ParamId::Position => &mut self.position,
            ParamId::Block(i, p) => self.blocks.get_mut(i)?.get_mut(p),
            ParamId::FinalNormGain => &mut self.final_norm_gain,
            ParamId::FinalNormBias => &mut self.final_norm_bias,
            ParamId::HeadOriginal => &mut self.head.original,
            ParamId::HeadExtension => &mut self.head.extension,
            ParamId::Lora(i, p, part) => {
                let a = self.blocks.get_mut(i)?.lora.get_mut(&p)?;
                match part {
                    LoraPart::A => &mut a.a,
                    LoraPart::B => &mut a.b,
                }
            }
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.param_ids()
            .into_iter()
            .map(|id| self.param(id).map_or(0, |p| p.len()))
            .sum()
    }

    /// SHA-256 over the parameter's shape and element bytes.
    pub fn param_hash(&self, id: ParamId) -> Option<String> {
        let p = self.param(id)?;
        let mut h = Sha256::new();
        h.update((p.nrows() as u64).to_le_bytes());
        h.update((p.ncols() as u64).to_le_bytes());
        for &x in p.iter() {
            h.update(x.to_le_bytes_vec());
        }
        Some(hex::encode(h.finalize()))
    }

    /// Replaces both extension blocks; row counts must agree and set `v_ext`.
    pub fn set_extension(&mut self, embed_rows: Array2<F>, head_rows: Array2<F>) -> Result<()> {
        let d = self.config.d_model;
        if embed_rows.ncols() != d || head_rows.ncols() != d || embed_rows.nrows() != head_rows.nrows() {
            return Err(Error::Shape(format!(
                "extension blocks {:?} / {:?} do not fit d_model {d}",
                embed_rows.dim(),
                head_rows.dim()
            )));
        }
        self.config.v_ext = embed_rows.nrows();
        self.embed.extension = embed_rows;
        self.head.extension = head_rows;
        Ok(())
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let cv = |a: &Array2<F>| a.mapv(|x| G::from(x).unwrap());
        Model {
            config: self.config,
            embed: PartitionedMatrix {
                original: cv(&self.embed.original),
                extension: cv(&self.embed.extension),
            },
            position: cv(&self.position),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: cv(&b.ln1_gain),
                    ln1_bias: cv(&b.ln1_bias),
                    wq: cv(&b.wq),
                    wk: cv(&b.wk),
                    wv: cv(&b.wv),
                    wo: cv(&b.wo),
                    ln2_gain: cv(&b.ln2_gain),
                    ln2_bias: cv(&b.ln2_bias),
                    w1: cv(&b.w1),
                    b1: cv(&b.b1),
                    w2: cv(&b.w2),
                    b2: cv(&b.b2),
                    lora: b
                        .lora
                        .iter()
                        .map(|(&k, a)| (k, LoraAdapter { a: cv(&a.a), b: cv(&a.b) }))
                        .collect(),
                })
                .collect(),
            final_norm_gain: cv(&self.final_norm_gain),
            final_norm_bias: cv(&self.final_norm_bias),
            head: PartitionedMatrix {
                original: cv(&self.head.original),
                extension: cv(&self.head.extension),
            },
        }
    }
}
