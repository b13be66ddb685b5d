#![allow(dead_code)]

use vdistill::corpus::generate_corpus;
use vdistill::init::{initialize_extension, EmbeddingInit, HeadInit, InitStrategy};
use vdistill::model::{init_base_model, Model, ModelConfig, Scalar};
use vdistill::tokenizer::{BpeTokenizer, ExtendedTokenizer, Tokenizer};

pub const CELL_CONNECT_TEXT: &str = "int CellConnectDLS(void) { return 0; }";

/// Merge rules that spell out each word of `words` left to right.
fn spell<'a>(words: &[&'a str]) -> Vec<(String, String)> {
    let mut merges = Vec::new();
    for w in words {
        for i in 1..w.len() {
            merges.push((w[..i].to_string(), w[i..i + 1].to_string()));
        }
    }
    merges
}

pub fn spelled_base(words: &[&str]) -> BpeTokenizer {
    BpeTokenizer::from_merges(&spell(words)).unwrap()
}

/// Base tokenizer giving the 17-token split of
/// `CELL_CONNECT_TEXT`.
pub fn cell_connect_base() -> BpeTokenizer {
    BpeTokenizer::from_merges(&spell(&["int", "Cell", "Connect", "void", "return", " {", " }"])).unwrap()
}

pub fn cell_connect_ext() -> ExtendedTokenizer {
    ExtendedTokenizer::with_added(cell_connect_base(), ["CellConnect", "DLS"]).unwrap()
}

pub fn pieces(tok: &impl Tokenizer, ids: &[u32]) -> Vec<String> {
    ids.iter()
        .map(|&i| String::from_utf8(tok.token_bytes(i).unwrap().to_vec()).unwrap())
        .collect()
}

/// Small synthetic setup: base tokenizer, an extension adding `added`, and
/// training texts.
pub struct Toy {
    pub base: BpeTokenizer,
    pub ext: ExtendedTokenizer,
    pub texts: Vec<String>,
}

pub fn toy(added: &[&str]) -> Toy {
    let texts = generate_corpus(40, 11);
    let base = BpeTokenizer::train(&texts, 300).unwrap();
    let ext = ExtendedTokenizer::with_added(base.clone(), added.iter().copied()).unwrap();
    Toy { base, ext, texts }
}

/// Domain identifiers that the toy base tokenizer splits into several pieces.
pub const TOY_ADDED: [&str; 4] = [" eratosthenes", " matplotlib", " dataframe", "linspace"];

pub fn config(v_orig: usize, d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq: 128,
        v_orig,
        v_ext: 0,
    }
}

/// Base model with an extension for `ext`.
pub fn extended_model<F: Scalar>(
    ext: &ExtendedTokenizer,
    d_model: usize,
    n_layers: usize,
    embedding: EmbeddingInit,
    head: HeadInit,
    seed: u64,
) -> Model<F> {
    let mut m = init_base_model::<F>(config(ext.base_vocab_size(), d_model, n_layers), seed).unwrap();
    initialize_extension(&mut m, ext, InitStrategy::new(embedding, head), seed + 100).unwrap();
    m
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central-difference gradient of `loss` with respect to parameter `id`,
/// restricted to `coords` (all coordinates when `None`).
pub fn fd_gradient(
    model: &Model<f64>,
    id: vdistill::model::ParamId,
    coords: Option<&[(usize, usize)]>,
    step: f64,
    loss: impl Fn(&Model<f64>) -> f64,
) -> ndarray::Array2<f64> {
    let shape = model.param(id).unwrap().dim();
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..shape.0).flat_map(|r| (0..shape.1).map(move |c| (r, c))).collect();
            &all
        }
    };
    let mut out = ndarray::Array2::zeros(shape);
    let mut m = model.clone();
    for &(r, c) in coords {
        let x = model.param(id).unwrap()[[r, c]];
        m.param_mut(id).unwrap()[[r, c]] = x + step;
        let up = loss(&m);
        m.param_mut(id).unwrap()[[r, c]] = x - step;
        let down = loss(&m);
        m.param_mut(id).unwrap()[[r, c]] = x;
        out[[r, c]] = (up - down) / (2.0 * step);
    }
    out
}

/// Largest element-wise relative difference between two models' parameters.
pub fn max_param_rel_diff(a: &Model<f64>, b: &Model<f64>) -> f64 {
    a.param_ids()
        .into_iter()
        .flat_map(|id| {
            let (x, y) = (a.param(id).unwrap(), b.param(id).unwrap());
            x.iter().zip(y.iter()).map(|(p, q)| rel_diff(*p, *q)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
