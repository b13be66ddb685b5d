use ndarray::{s, Array2, Axis};

use super::grad::{Gradients, TrainableSet};
use super::lora::LoraAdapter;
use super::ops::{c, gelu, layer_norm, softmax_rows, NormTrace};
use super::{Block, BlockParam, Model, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

pub(crate) struct BlockTrace<F> {
    pub ln1: NormTrace<F>,
    pub a1: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Attention probabilities, one `L × L` matrix per head.
    pub probs: Vec<Array2<F>>,
    pub ctx: Array2<F>,
    pub ln2: NormTrace<F>,
    pub a2: Array2<F>,
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

/// Activations recorded by a forward pass.
pub struct ForwardTrace<F> {
    pub ids: Vec<TokenId>,
    /// `hidden[0]` is the embedding sum; `hidden[i + 1]` is block `i`'s output.
    pub hidden: Vec<Array2<F>>,
    pub logits: Array2<F>,
    pub(crate) blocks: Vec<BlockTrace<F>>,
    pub(crate) final_norm: NormTrace<F>,
    pub(crate) final_out: Array2<F>,
}

pub(crate) fn linear<F: Scalar>(x: &Array2<F>, w: &Array2<F>, lora: Option<&LoraAdapter<F>>) -> Array2<F> {
    let mut y = x.dot(w);
    if let Some(ad) = lora {
        y += &x.dot(&ad.b).dot(&ad.a);
    }
    y
}

fn block_forward<F: Scalar>(block: &Block<F>, x: Array2<F>, n_heads: usize) -> (Array2<F>, BlockTrace<F>) {
    let l = x.nrows();
    let d = x.ncols();
    let hd = d / n_heads;
    let scale = F::one() / c::<F>(hd as f64).sqrt();
    let lw = |p: BlockParam| block.lora.get(&p);

    let (a1, ln1) = layer_norm(&x, &block.ln1_gain, &block.ln1_bias);
    let q = linear(&a1, &block.wq, lw(BlockParam::Wq));
    let k = linear(&a1, &block.wk, lw(BlockParam::Wk));
    let v = linear(&a1, &block.wv, lw(BlockParam::Wv));
    let mut ctx = Array2::zeros((l, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for i in 0..l {
            for j in i + 1..l {
                scores[[i, j]] = F::neg_infinity();
            }
        }
        let p = softmax_rows(scores.view());
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let attn = linear(&ctx, &block.wo, lw(BlockParam::Wo));
    let u = &x + &attn;
    let (a2, ln2) = layer_norm(&u, &block.ln2_gain, &block.ln2_bias);
    let pre = linear(&a2, &block.w1, lw(BlockParam::W1)) + &block.b1.row(0);
    let act = pre.mapv(gelu);
    let out = &x + &(linear(&act, &block.w2, lw(BlockParam::W2)) + &block.b2.row(0));
    let trace = BlockTrace {
        ln1,
        a1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        a2,
        pre,
        act,
    };
    (out, trace)
}

impl<F: Scalar> Model<F> {
    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_seq: self.config.max_seq,
            });
        }
        let v = self.config.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::IdOutOfRange { id, vocab_size: v });
        }
        Ok(())
    }

    fn embed_ids(&self, ids: &[TokenId]) -> Array2<F> {
        let mut h = Array2::zeros((ids.len(), self.config.d_model));
        for (t, (mut row, &id)) in h.rows_mut().into_iter().zip(ids).enumerate() {
            row.assign(&self.embed.row(id));
            row += &self.position.row(t);
        }
        h
    }

    fn head_logits(&self, hf: &Array2<F>) -> Array2<F> {
        let orig = hf.dot(&self.head.original.t());
        if self.config.v_ext == 0 {
            return orig;
        }
        let ext = hf.dot(&self.head.extension.t());
        ndarray::concatenate(Axis(1), &[orig.view(), ext.view()]).expect("rows agree")
    }

    /// Logits `L × (v_orig + v_ext)`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Array2<F>> {
        Ok(self.forward_traced(ids)?.logits)
    }

    /// Forward pass keeping every activation needed for backward.
    pub fn forward_traced(&self, ids: &[TokenId]) -> Result<ForwardTrace<F>> {
        self.check_ids(ids)?;
        let mut h = self.embed_ids(ids);
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            hidden.push(h.clone());
            let (out, tr) = block_forward(block, h, self.config.n_heads);
            blocks.push(tr);
            h = out;
        }
        hidden.push(h.clone());
        let (final_out, final_norm) = layer_norm(&h, &self.final_norm_gain, &self.final_norm_bias);
        let logits = self.head_logits(&final_out);
        Ok(ForwardTrace {
            ids: ids.to_vec(),
            hidden,
            logits,
            blocks,
            final_norm,
            final_out,
        })
    }
}

/// Records one forward pass and differentiates a loss on its logits.
pub struct GradientTape<'m, F> {
    model: &'m Model<F>,
    trace: Option<ForwardTrace<F>>,
}

impl<'m, F: Scalar> GradientTape<'m, F> {
    pub fn new(model: &'m Model<F>) -> Self {
        Self { model, trace: None }
    }

    pub fn forward(&mut self, ids: &[TokenId]) -> Result<&Array2<F>> {
        let trace = self.model.forward_traced(ids)?;
        Ok(&self.trace.insert(trace).logits)
    }

    pub fn trace(&self) -> Option<&ForwardTrace<F>> {
        self.trace.as_ref()
    }

    pub fn logits(&self) -> Result<&Array2<F>> {
        Ok(&self.trace.as_ref().ok_or(Error::NoForward)?.logits)
    }

    /// Gradients of `sum(dlogits ⊙ logits)` for exactly the parameters in
    /// `wrt`.
    pub fn backward(&self, dlogits: &Array2<F>, wrt: &TrainableSet) -> Result<Gradients<F>> {
        let trace = self.trace.as_ref().ok_or(Error::NoForward)?;
        if dlogits.dim() != trace.logits.dim() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                dlogits.dim(),
                trace.logits.dim()
            )));
        }
        Ok(self.model.backward(trace, dlogits, wrt))
    }
}
