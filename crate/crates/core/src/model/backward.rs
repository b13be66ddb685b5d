use ndarray::{s, Array2, Axis};

use super::forward::{BlockTrace, ForwardTrace};
use super::grad::{Gradients, TrainableSet};
use super::lora::LoraAdapter;
use super::ops::{c, gelu_grad, layer_norm_backward};
use super::{Block, BlockParam, LoraPart, Model, ParamId, Scalar};

/// Backward of `y = x·W + (x·B)·A`. Returns `dx` when asked for.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    dy: &Array2<F>,
    w: &Array2<F>,
    lora: Option<&LoraAdapter<F>>,
    layer: usize,
    p: BlockParam,
    wrt: &TrainableSet,
    grads: &mut Gradients<F>,
    need_dx: bool,
) -> Option<Array2<F>> {
    if wrt.contains(ParamId::Block(layer, p)) {
        *grads.slot(ParamId::Block(layer, p), w.dim()) += &x.t().dot(dy);
    }
    let mut dx = need_dx.then(|| dy.dot(&w.t()));
    if let Some(ad) = lora {
        let dy_at = dy.dot(&ad.a.t());
        let id_a = ParamId::Lora(layer, p, LoraPart::A);
        let id_b = ParamId::Lora(layer, p, LoraPart::B);
        if wrt.contains(id_a) {
            *grads.slot(id_a, ad.a.dim()) += &x.dot(&ad.b).t().dot(dy);
        }
        if wrt.contains(id_b) {
            *grads.slot(id_b, ad.b.dim()) += &x.t().dot(&dy_at);
        }
        if let Some(dx) = dx.as_mut() {
            *dx += &dy_at.dot(&ad.b.t());
        }
    }
    dx
}

fn block_backward<F: Scalar>(
    block: &Block<F>,
    tr: &BlockTrace<F>,
    dout: &Array2<F>,
    layer: usize,
    n_heads: usize,
    wrt: &TrainableSet,
    grads: &mut Gradients<F>,
    need_dx: bool,
) -> Option<Array2<F>> {
    let lw = |p: BlockParam| block.lora.get(&p);
    let has = |p: BlockParam| wrt.contains(ParamId::Block(layer, p));
    let l = dout.nrows();
    let d = dout.ncols();
    let hd = d / n_heads;
    let scale = F::one() / c::<F>(hd as f64).sqrt();

    // out = x + act·W2 + b2
    if has(BlockParam::B2) {
        let g = grads.slot(ParamId::Block(layer, BlockParam::B2), block.b2.dim());
        g.row_mut(0).zip_mut_with(&dout.sum_axis(Axis(0)), |a, &b| *a += b);
    }
    let dact = linear_backward(&tr.act, dout, &block.w2, lw(BlockParam::W2), layer, BlockParam::W2, wrt, grads, true)
        .expect("requested");
    let mut dpre = dact;
    dpre.zip_mut_with(&tr.pre, |g, &z| *g *= gelu_grad(z));
    if has(BlockParam::B1) {
        let g = grads.slot(ParamId::Block(layer, BlockParam::B1), block.b1.dim());
        g.row_mut(0).zip_mut_with(&dpre.sum_axis(Axis(0)), |a, &b| *a += b);
    }
    let da2 = linear_backward(&tr.a2, &dpre, &block.w1, lw(BlockParam::W1), layer, BlockParam::W1, wrt, grads, true)
        .expect("requested");
    let mut dgain = has(BlockParam::Ln2Gain).then(|| Array2::zeros(block.ln2_gain.dim()));
    let mut dbias = has(BlockParam::Ln2Bias).then(|| Array2::zeros(block.ln2_bias.dim()));
    let du = layer_norm_backward(&da2, &block.ln2_gain, &tr.ln2, dgain.as_mut(), dbias.as_mut());
    if let Some(g) = dgain {
        *grads.slot(ParamId::Block(layer, BlockParam::Ln2Gain), g.dim()) += &g;
    }
    if let Some(g) = dbias {
        *grads.slot(ParamId::Block(layer, BlockParam::Ln2Bias), g.dim()) += &g;
    }

    // u = x + ctx·Wo
    let dctx = linear_backward(&tr.ctx, &du, &block.wo, lw(BlockParam::Wo), layer, BlockParam::Wo, wrt, grads, true)
        .expect("requested");
    let mut dq = Array2::zeros((l, d));
    let mut dk = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for (h, p) in tr.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&tr.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (&(&dp - &row_dot) * p) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&tr.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&tr.q.slice(cols)));
    }
    let mut da1 = linear_backward(&tr.a1, &dq, &block.wq, lw(BlockParam::Wq), layer, BlockParam::Wq, wrt, grads, true)
        .expect("requested");
    da1 += &linear_backward(&tr.a1, &dk, &block.wk, lw(BlockParam::Wk), layer, BlockParam::Wk, wrt, grads, true)
        .expect("requested");
    da1 += &linear_backward(&tr.a1, &dv, &block.wv, lw(BlockParam::Wv), layer, BlockParam::Wv, wrt, grads, true)
        .expect("requested");
    let mut dgain = has(BlockParam::Ln1Gain).then(|| Array2::zeros(block.ln1_gain.dim()));
    let mut dbias = has(BlockParam::Ln1Bias).then(|| Array2::zeros(block.ln1_bias.dim()));
    let dx_attn = (need_dx || dgain.is_some() || dbias.is_some())
        .then(|| layer_norm_backward(&da1, &block.ln1_gain, &tr.ln1, dgain.as_mut(), dbias.as_mut()));
    if let Some(g) = dgain {
        *grads.slot(ParamId::Block(layer, BlockParam::Ln1Gain), g.dim()) += &g;
    }
    if let Some(g) = dbias {
        *grads.slot(ParamId::Block(layer, BlockParam::Ln1Bias), g.dim()) += &g;
    }
    dx_attn.filter(|_| need_dx).map(|dxa| dout + &du + &dxa)
}

impl<F: Scalar> Model<F> {
    pub(crate) fn backward(&self, trace: &ForwardTrace<F>, dlogits: &Array2<F>, wrt: &TrainableSet) -> Gradients<F> {
        let mut grads = Gradients::default();
        let v = self.config.v_orig;
        let d_orig = dlogits.slice(s![.., ..v]);
        let d_ext = dlogits.slice(s![.., v..]);
        let hf = &trace.final_out;
        if wrt.contains(ParamId::HeadOriginal) {
            grads.insert(ParamId::HeadOriginal, d_orig.t().dot(hf));
        }
        if wrt.contains(ParamId::HeadExtension) && self.config.v_ext > 0 {
            grads.insert(ParamId::HeadExtension, d_ext.t().dot(hf));
        }
        let need_norm = wrt.contains(ParamId::FinalNormGain) || wrt.contains(ParamId::FinalNormBias);
        let deepest = wrt.deepest_layer(self.blocks.len());
        let needs_stream = deepest.is_some() || (self.blocks.is_empty() && wrt.needs_input());
        if !need_norm && !needs_stream {
            return grads;
        }
        let mut dhf = d_orig.dot(&self.head.original);
        if self.config.v_ext > 0 {
            dhf += &d_ext.dot(&self.head.extension);
        }
        let mut dgain = wrt.contains(ParamId::FinalNormGain).then(|| Array2::zeros(self.final_norm_gain.dim()));
        let mut dbias = wrt.contains(ParamId::FinalNormBias).then(|| Array2::zeros(self.final_norm_bias.dim()));
        let mut dh = layer_norm_backward(&dhf, &self.final_norm_gain, &trace.final_norm, dgain.as_mut(), dbias.as_mut());
        if let Some(g) = dgain {
            grads.insert(ParamId::FinalNormGain, g);
        }
        if let Some(g) = dbias {
            grads.insert(ParamId::FinalNormBias, g);
        }
        if !needs_stream {
            return grads;
        }
        let stop = deepest.unwrap_or(0);
        let needs_input = wrt.needs_input();
        for layer in (stop..self.blocks.len()).rev() {
            let need_dx = layer > stop || needs_input;
            match block_backward(
                &self.blocks[layer],
                &trace.blocks[layer],
                &dh,
                layer,
                self.config.n_heads,
                wrt,
                &mut grads,
                need_dx,
            ) {
                Some(dx) => dh = dx,
                None => return grads,
            }
        }
        if wrt.contains(ParamId::Position) {
            let mut g = Array2::zeros(self.position.dim());
            g.slice_mut(s![..dh.nrows(), ..]).assign(&dh);
            grads.insert(ParamId::Position, g);
        }
        let want_orig = wrt.contains(ParamId::EmbedOriginal);
        let want_ext = wrt.contains(ParamId::EmbedExtension) && self.config.v_ext > 0;
        if want_orig {
            grads.slot(ParamId::EmbedOriginal, self.embed.original.dim());
        }
        if want_ext {
            grads.slot(ParamId::EmbedExtension, self.embed.extension.dim());
        }
        for (row, &id) in dh.rows().into_iter().zip(&trace.ids) {
            let id = id as usize;
            if id < v && want_orig {
                let mut g = grads.slot(ParamId::EmbedOriginal, self.embed.original.dim()).row_mut(id);
                g += &row;
            } else if id >= v && want_ext {
                let mut g = grads.slot(ParamId::EmbedExtension, self.embed.extension.dim()).row_mut(id - v);
                g += &row;
            }
        }
        grads
    }
}
