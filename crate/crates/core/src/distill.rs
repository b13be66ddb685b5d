//! Self-distillation losses.
//!
//! The teacher is the model itself run on the original tokenization; the
//! student is the same parameters run on the extended tokenization. Student
//! logits are cut back to the original vocabulary before the softmax, paired
//! with teacher columns through the alignment, and compared with KL. The head
//! extension is trained with ordinary next-token cross-entropy over the full
//! vocabulary.

use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::alignment::{map_token_texts, select_training_positions, ColumnSelection};
use crate::error::{Error, Result};
use crate::model::{softmax_rows, GradientTape, Gradients, Model, ParamId, Scalar, TrainableSet};
use crate::tokenizer::{BpeTokenizer, ExtendedTokenizer, TokenId, Tokenizer};
use crate::train::Adam;

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `Σ p·ln(p/q)` with `0·ln(0/q) = 0` and `q` clamped at [`PROB_FLOOR`].
pub fn kl_divergence<F: Scalar>(p: ArrayView1<'_, F>, q: ArrayView1<'_, F>) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let floor = F::from(PROB_FLOOR).unwrap();
    Ok(p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > F::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(floor).ln()))
        .sum())
}

/// Mean over rows of `-ln p[row, target]`, probabilities clamped at
/// [`PROB_FLOOR`].
pub fn cross_entropy<F: Scalar>(targets: &[TokenId], probs: ArrayView2<'_, F>) -> Result<F> {
    if targets.len() != probs.nrows() {
        return Err(Error::Shape(format!("{} targets for {} rows", targets.len(), probs.nrows())));
    }
    if targets.is_empty() {
        return Err(Error::SequenceTooShort(0));
    }
    let floor = F::from(PROB_FLOOR).unwrap();
    let mut total = F::zero();
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        let p = *row.get(t as usize).ok_or(Error::IdOutOfRange {
            id: t,
            vocab_size: row.len(),
        })?;
        total -= p.max(floor).ln();
    }
    Ok(total / F::from(targets.len()).unwrap())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLossReport {
    pub kl_loss: f64,
    pub ce_loss: f64,
    pub n_columns: usize,
    pub n_orig_tokens: usize,
    pub n_ext_tokens: usize,
}

/// One text tokenized both ways, with its column pairing precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSample {
    pub orig_ids: Vec<TokenId>,
    pub ext_ids: Vec<TokenId>,
    pub selection: ColumnSelection,
}

impl DistillSample {
    /// Tokenizes `text` with both tokenizers. Texts longer than `max_seq`
    /// tokens are cut at an original-token boundary so both sequences fit.
    pub fn new(base: &BpeTokenizer, ext: &ExtendedTokenizer, text: &str, max_seq: usize) -> Result<Self> {
        if max_seq == 0 {
            return Err(Error::invalid("max_seq must be positive"));
        }
        let bytes = text.as_bytes();
        let mut orig = base.encode_bytes(bytes);
        let mut ext_ids = ext.encode_bytes(bytes);
        if orig.len() > max_seq || ext_ids.len() > max_seq {
            let mut ends = Vec::with_capacity(orig.len());
            let mut at = 0;
            for &id in &orig {
                at += base.token_bytes(id).map_or(0, <[u8]>::len);
                ends.push(at);
            }
            for keep in (1..=max_seq.min(orig.len())).rev() {
                let prefix = &bytes[..ends[keep - 1]];
                orig = base.encode_bytes(prefix);
                ext_ids = ext.encode_bytes(prefix);
                if orig.len() <= max_seq && ext_ids.len() <= max_seq {
                    break;
                }
            }
        }
        let align = map_token_texts(&orig, &ext_ids, base, ext)?;
        let selection = select_training_positions(&align);
        Ok(Self {
            orig_ids: orig,
            ext_ids,
            selection,
        })
    }
}

/// Parameter groups of the two loss graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGraphs {
    pub kl: Option<TrainableSet>,
    pub ce: Option<TrainableSet>,
}

impl LossGraphs {
    /// KL trains the embedding extension, CE the head extension.
    pub fn dual() -> Self {
        Self {
            kl: Some(TrainableSet::only([ParamId::EmbedExtension])),
            ce: Some(TrainableSet::only([ParamId::HeadExtension])),
        }
    }

    /// No KL graph; the embedding extension joins the CE graph.
    pub fn ce_only() -> Self {
        Self {
            kl: None,
            ce: Some(TrainableSet::only([ParamId::EmbedExtension, ParamId::HeadExtension])),
        }
    }

    pub fn ce(set: TrainableSet) -> Self {
        Self { kl: None, ce: Some(set) }
    }

    pub fn evaluation() -> Self {
        Self { kl: None, ce: None }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        if let (Some(kl), Some(ce)) = (&self.kl, &self.ce) {
            let shared = kl.intersection(ce);
            if !shared.is_empty() {
                let names: Vec<String> = shared.iter().map(ParamId::name).collect();
                return Err(Error::GraphsNotDisjoint(names.join(", ")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleGradients<F> {
    pub report: DistillLossReport,
    pub kl: Option<Gradients<F>>,
    pub ce: Option<Gradients<F>>,
}

/// The given rows of a position-major logit matrix, cut to the first
/// `v_orig` vocabulary columns.
pub fn truncate_logits<F: Scalar>(logits: &Array2<F>, rows: &[usize], v_orig: usize) -> Array2<F> {
    let mut picked = Array2::zeros((rows.len(), v_orig));
    for (k, &r) in rows.iter().enumerate() {
        picked.row_mut(k).assign(&logits.slice(s![r, ..v_orig]));
    }
    picked
}

fn truncated_probs<F: Scalar>(logits: &Array2<F>, rows: &[usize], v_orig: usize) -> Array2<F> {
    softmax_rows(truncate_logits(logits, rows, v_orig).view())
}

/// KL loss and its logit gradient for the student rows.
fn kl_terms<F: Scalar>(
    model: &Model<F>,
    sample: &DistillSample,
    student_logits: &Array2<F>,
) -> Result<(F, Array2<F>)> {
    let sel = &sample.selection;
    if sel.is_empty() {
        return Err(Error::NoAlignablePositions);
    }
    let v = model.config.v_orig;
    let teacher = model.forward(&sample.orig_ids)?;
    let p = truncated_probs(&teacher, &sel.orig_cols, v);
    let q = truncated_probs(student_logits, &sel.ext_cols, v);
    let n = F::from(sel.len()).unwrap();
    let mut loss = F::zero();
    let mut dlogits = Array2::zeros(student_logits.raw_dim());
    for (k, &e) in sel.ext_cols.iter().enumerate() {
        loss += kl_divergence(p.row(k), q.row(k))?;
        let mut g = dlogits.slice_mut(s![e, ..v]);
        g.assign(&((&q.row(k) - &p.row(k)) / n));
    }
    Ok((loss / n, dlogits))
}

/// Next-token CE over the full vocabulary and its logit gradient.
pub(crate) fn ce_terms<F: Scalar>(ids: &[TokenId], logits: &Array2<F>) -> Result<(F, Array2<F>)> {
    if ids.len() < 2 {
        return Err(Error::SequenceTooShort(ids.len()));
    }
    let n = ids.len() - 1;
    let probs = softmax_rows(logits.slice(s![..n, ..]));
    let targets = &ids[1..];
    let loss = cross_entropy(targets, probs.view())?;
    let nf = F::from(n).unwrap();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    dlogits.slice_mut(s![..n, ..]).assign(&(&probs / nf));
    for (t, &y) in targets.iter().enumerate() {
        dlogits[[t, y as usize]] -= F::one() / nf;
    }
    Ok((loss, dlogits))
}

/// Both losses on one sample plus the gradients of each requested graph,
/// all taken at the current parameters.
pub fn sample_gradients<F: Scalar>(
    model: &Model<F>,
    sample: &DistillSample,
    graphs: &LossGraphs,
) -> Result<SampleGradients<F>> {
    graphs.check_disjoint()?;
    let mut tape = GradientTape::new(model);
    let logits = tape.forward(&sample.ext_ids)?.clone();
    let (kl, dkl) = kl_terms(model, sample, &logits)?;
    let (ce, dce) = ce_terms(&sample.ext_ids, &logits)?;
    let kl_grads = graphs.kl.as_ref().map(|set| tape.backward(&dkl, set)).transpose()?;
    let ce_grads = graphs.ce.as_ref().map(|set| tape.backward(&dce, set)).transpose()?;
    Ok(SampleGradients {
        report: DistillLossReport {
            kl_loss: kl.to_f64().unwrap(),
            ce_loss: ce.to_f64().unwrap(),
            n_columns: sample.selection.len(),
            n_orig_tokens: sample.orig_ids.len(),
            n_ext_tokens: sample.ext_ids.len(),
        },
        kl: kl_grads,
        ce: ce_grads,
    })
}

/// Loss report without gradients.
pub fn evaluate_sample<F: Scalar>(model: &Model<F>, sample: &DistillSample) -> Result<DistillLossReport> {
    Ok(sample_gradients(model, sample, &LossGraphs::evaluation())?.report)
}

/// KL component for one text.
pub fn embedding_distill_loss<F: Scalar>(
    model: &Model<F>,
    base: &BpeTokenizer,
    ext: &ExtendedTokenizer,
    text: &str,
) -> Result<f64> {
    let sample = DistillSample::new(base, ext, text, model.config.max_seq)?;
    let logits = model.forward(&sample.ext_ids)?;
    Ok(kl_terms(model, &sample, &logits)?.0.to_f64().unwrap())
}

/// CE component for one text.
pub fn head_ce_loss<F: Scalar>(model: &Model<F>, ext: &ExtendedTokenizer, text: &str) -> Result<f64> {
    let ids = ext.encode(text);
    let ids = &ids[..ids.len().min(model.config.max_seq)];
    if ids.len() < 2 {
        return Err(Error::SequenceTooShort(ids.len()));
    }
    let logits = model.forward(ids)?;
    Ok(ce_terms(ids, &logits)?.0.to_f64().unwrap())
}

/// One update per loss graph. With `kl` set the two optimizers must own
/// disjoint parameters; without it only the CE optimizer steps.
pub fn dual_step<F: Scalar>(
    model: &mut Model<F>,
    kl: Option<&mut Adam<F>>,
    ce: &mut Adam<F>,
    sample: &DistillSample,
) -> Result<DistillLossReport> {
    let graphs = LossGraphs {
        kl: kl.as_ref().map(|o| o.params().clone()),
        ce: Some(ce.params().clone()),
    };
    let g = sample_gradients(model, sample, &graphs)?;
    if let (Some(opt), Some(grads)) = (kl, g.kl.as_ref()) {
        opt.step(model, grads)?;
    }
    if let Some(grads) = g.ce.as_ref() {
        ce.step(model, grads)?;
    }
    Ok(g.report)
}

/// Per-epoch metric table written as `epoch,<column>...`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    /// `rows[e][c]` is the value of column `c` at epoch `e`.
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn single(column: impl Into<String>, values: &[f64]) -> Self {
        Self {
            columns: vec![column.into()],
            rows: values.iter().map(|&v| vec![v]).collect(),
        }
    }

    /// Adds a column, padding shorter series with empty cells.
    pub fn push_column(&mut self, name: impl Into<String>, values: &[f64]) {
        let width = self.columns.len();
        self.columns.push(name.into());
        while self.rows.len() < values.len() {
            self.rows.push(vec![f64::NAN; width]);
        }
        for (e, row) in self.rows.iter_mut().enumerate() {
            row.push(values.get(e).copied().unwrap_or(f64::NAN));
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (e, row) in self.rows.iter().enumerate() {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:.8}") }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| if v.is_empty() { Ok(f64::NAN) } else { v.parse::<f64>() })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("bad metric value: {e}")))?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

pub const TRAIN_KL_CSV: &str = "train_kl_losses.csv";
pub const TRAIN_CE_CSV: &str = "train_ce_losses.csv";
pub const VAL_KL_CSV: &str = "val_kl_losses.csv";
pub const VAL_CE_CSV: &str = "val_ce_losses.csv";
