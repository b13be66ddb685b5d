use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, Adam, Objective, Phase, PhaseConfig, Schedule};
use crate::analysis::{
    model_similarity, SimilarityReport, Which, EMBEDDING_SIMILARITY_CSV, HEAD_SIMILARITY_CSV,
};
use crate::distill::{
    ce_terms, evaluate_sample, sample_gradients, DistillLossReport, DistillSample, LossGraphs, MetricsTable,
    TRAIN_CE_CSV, TRAIN_KL_CSV, VAL_CE_CSV, VAL_KL_CSV,
};
use crate::error::{Error, Result};
use crate::model::{BlockParam, GradientTape, Gradients, Model, ParamId, Scalar, TrainableSet};
use crate::tokenizer::{BpeTokenizer, ExtendedTokenizer, TokenId, Tokenizer, END_OF_TEXT_ID};

/// Tokenized training and validation texts.
pub struct TrainData<'a> {
    pub base: &'a BpeTokenizer,
    pub ext: &'a ExtendedTokenizer,
    pub train: Vec<DistillSample>,
    pub val: Vec<DistillSample>,
}

impl<'a> TrainData<'a> {
    pub fn new<S: AsRef<str>>(
        base: &'a BpeTokenizer,
        ext: &'a ExtendedTokenizer,
        train: &[S],
        val: &[S],
        max_seq: usize,
    ) -> Result<Self> {
        Ok(Self {
            base,
            ext,
            train: prepare_samples(base, ext, train, max_seq)?,
            val: prepare_samples(base, ext, val, max_seq)?,
        })
    }
}

/// Samples usable by both losses; texts shorter than two extended tokens are
/// dropped with a warning.
pub fn prepare_samples<S: AsRef<str>>(
    base: &BpeTokenizer,
    ext: &ExtendedTokenizer,
    texts: &[S],
    max_seq: usize,
) -> Result<Vec<DistillSample>> {
    let mut out = Vec::with_capacity(texts.len());
    for t in texts {
        let s = DistillSample::new(base, ext, t.as_ref(), max_seq)?;
        if s.ext_ids.len() >= 2 && !s.selection.is_empty() {
            out.push(s);
        }
    }
    if out.len() < texts.len() {
        log::warn!("dropped {} texts too short to train on", texts.len() - out.len());
    }
    Ok(out)
}

/// Per-epoch losses; index 0 is measured before any update, later entries
/// average the training steps of that epoch (validation entries are measured
/// after the epoch).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub train_kl: Vec<f64>,
    pub train_ce: Vec<f64>,
    pub val_kl: Vec<f64>,
    pub val_ce: Vec<f64>,
    pub embedding_similarity: SimilarityReport,
    pub head_similarity: SimilarityReport,
    pub steps: usize,
}

impl PhaseMetrics {
    fn record_eval<F: Scalar>(&mut self, model: &Model<F>, data: &TrainData<'_>, epoch: usize) -> Result<()> {
        let (kl, ce) = mean_losses(model, &data.val)?;
        self.val_kl.push(kl);
        self.val_ce.push(ce);
        self.embedding_similarity
            .push(epoch, model_similarity(model, data.ext, Which::Embedding)?);
        self.head_similarity.push(epoch, model_similarity(model, data.ext, Which::Head)?);
        Ok(())
    }

    fn start<F: Scalar>(model: &Model<F>, data: &TrainData<'_>) -> Result<Self> {
        let mut m = Self::default();
        let (kl, ce) = mean_losses(model, &data.train)?;
        m.train_kl.push(kl);
        m.train_ce.push(ce);
        m.record_eval(model, data, 0)?;
        Ok(m)
    }
}

impl PhaseMetrics {
    /// Loss tables keyed by their file names, one column named `column`.
    pub fn loss_tables(&self, column: &str) -> [(&'static str, MetricsTable); 4] {
        [
            (TRAIN_KL_CSV, MetricsTable::single(column, &self.train_kl)),
            (TRAIN_CE_CSV, MetricsTable::single(column, &self.train_ce)),
            (VAL_KL_CSV, MetricsTable::single(column, &self.val_kl)),
            (VAL_CE_CSV, MetricsTable::single(column, &self.val_ce)),
        ]
    }

    /// Writes the four loss CSVs and both similarity trajectories to `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, column: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, table) in self.loss_tables(column) {
            table.write(dir.join(name))?;
        }
        self.embedding_similarity.write(dir.join(EMBEDDING_SIMILARITY_CSV))?;
        self.head_similarity.write(dir.join(HEAD_SIMILARITY_CSV))?;
        Ok(())
    }
}

fn mean_losses<F: Scalar>(model: &Model<F>, samples: &[DistillSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut kl, mut ce) = (0.0, 0.0);
    for s in samples {
        let r = evaluate_sample(model, s)?;
        kl += r.kl_loss;
        ce += r.ce_loss;
    }
    let n = samples.len() as f64;
    Ok((kl / n, ce / n))
}

/// One update from `samples`: one forward/backward per sample, gradients
/// averaged, then one step per optimizer.
pub fn accumulated_step<F: Scalar>(
    model: &mut Model<F>,
    samples: &[&DistillSample],
    mut kl: Option<&mut Adam<F>>,
    mut ce: Option<&mut Adam<F>>,
) -> Result<Vec<DistillLossReport>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let graphs = LossGraphs {
        kl: kl.as_ref().map(|o| o.params().clone()),
        ce: ce.as_ref().map(|o| o.params().clone()),
    };
    let mut acc_kl = Gradients::default();
    let mut acc_ce = Gradients::default();
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let g = sample_gradients(model, s, &graphs)?;
        if let Some(g) = &g.kl {
            acc_kl.accumulate(g);
        }
        if let Some(g) = &g.ce {
            acc_ce.accumulate(g);
        }
        reports.push(g.report);
    }
    let inv = F::one() / F::from(samples.len()).unwrap();
    acc_kl.scale(inv);
    acc_ce.scale(inv);
    if let Some(opt) = kl.as_deref_mut() {
        opt.step(model, &acc_kl)?;
    }
    if let Some(opt) = ce.as_deref_mut() {
        opt.step(model, &acc_ce)?;
    }
    Ok(reports)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

struct Run<'c> {
    cfg: &'c PhaseConfig,
    kl: Option<TrainableSet>,
    ce: TrainableSet,
    schedule: Schedule,
}

/// Trains `epochs` epochs, restarting optimizers and schedule at
/// `cfg.restart_at`. `first_epoch` numbers the metric rows.
fn train_epochs<F: Scalar>(
    model: &mut Model<F>,
    data: &TrainData<'_>,
    run: &Run<'_>,
    epochs: usize,
    first_epoch: usize,
    metrics: &mut PhaseMetrics,
) -> Result<()> {
    let cfg = run.cfg;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let segments: Vec<usize> = match cfg.restart_at {
        Some(r) if r < epochs => vec![r, epochs - r],
        _ => vec![epochs],
    };
    let mut epoch = first_epoch;
    for seg in segments {
        let total = seg * steps_per_epoch;
        let schedule = run.schedule;
        let mut opt_kl = run.kl.clone().map(|s| Adam::new(s, cfg.learning_rate));
        let mut opt_ce = Adam::new(run.ce.clone(), cfg.learning_rate);
        let mut step = 0;
        for _ in 0..seg {
            epoch += 1;
            let order = epoch_order(n, cfg.seed, epoch);
            let (mut kl_sum, mut ce_sum) = (0.0, 0.0);
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let lr = cfg.learning_rate * lr_at(&schedule, step, total);
                if let Some(o) = opt_kl.as_mut() {
                    o.set_lr(lr);
                }
                opt_ce.set_lr(lr);
                let batch: Vec<&DistillSample> = chunk.iter().map(|&i| &data.train[i]).collect();
                for r in accumulated_step(model, &batch, opt_kl.as_mut(), Some(&mut opt_ce))? {
                    kl_sum += r.kl_loss;
                    ce_sum += r.ce_loss;
                }
            }
            metrics.train_kl.push(kl_sum / n as f64);
            metrics.train_ce.push(ce_sum / n as f64);
            metrics.steps += steps_per_epoch;
            metrics.record_eval(model, data, epoch)?;
            log::info!(
                "{} {} epoch {epoch}: train kl {:.5} ce {:.5} | val kl {:.5} ce {:.5}",
                cfg.phase,
                cfg.strategy,
                metrics.train_kl.last().unwrap(),
                metrics.train_ce.last().unwrap(),
                metrics.val_kl.last().unwrap(),
                metrics.val_ce.last().unwrap(),
            );
        }
    }
    Ok(())
}

fn check<F: Scalar>(model: &Model<F>, data: &TrainData<'_>, cfg: &PhaseConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if model.config.v_orig != data.base.vocab_size() || model.config.v_ext != data.ext.n_added() {
        return Err(Error::invalid(format!(
            "model vocabulary {}+{} does not match tokenizers {}+{}",
            model.config.v_orig,
            model.config.v_ext,
            data.base.vocab_size(),
            data.ext.n_added()
        )));
    }
    Ok(())
}

fn run_with<F: Scalar>(
    model: &mut Model<F>,
    data: &TrainData<'_>,
    cfg: &PhaseConfig,
    kl: Option<TrainableSet>,
    ce: TrainableSet,
    schedule: Schedule,
) -> Result<PhaseMetrics> {
    let mut metrics = PhaseMetrics::start(model, data)?;
    let run = Run { cfg, kl, ce, schedule };
    train_epochs(model, data, &run, cfg.epochs, 0, &mut metrics)?;
    Ok(metrics)
}

/// New modules only. `klce` trains the embedding extension with KL and the
/// head extension with CE on separate optimizers; `ce` trains both with CE.
pub fn run_phase1<F: Scalar>(model: &mut Model<F>, data: &TrainData<'_>, cfg: &PhaseConfig) -> Result<PhaseMetrics> {
    check(model, data, cfg)?;
    let (kl, ce) = match cfg.strategy.objective {
        Objective::KlCe => (
            Some(TrainableSet::only([ParamId::EmbedExtension])),
            TrainableSet::only([ParamId::HeadExtension]),
        ),
        Objective::Ce => (None, TrainableSet::only([ParamId::EmbedExtension, ParamId::HeadExtension])),
    };
    run_with(model, data, cfg, kl, ce, Schedule::WarmupLinearDecay { warmup_fraction: cfg.warmup_fraction })
}

/// Whole embedding and head under CE; blocks frozen.
pub fn run_phase2<F: Scalar>(model: &mut Model<F>, data: &TrainData<'_>, cfg: &PhaseConfig) -> Result<PhaseMetrics> {
    check(model, data, cfg)?;
    let ce = TrainableSet::only([
        ParamId::EmbedOriginal,
        ParamId::EmbedExtension,
        ParamId::HeadOriginal,
        ParamId::HeadExtension,
    ]);
    run_with(model, data, cfg, None, ce, Schedule::WarmupLinearDecay { warmup_fraction: cfg.warmup_fraction })
}

/// Adapters on every weight matrix of every block; only adapters train.
/// Warmup spans the first epoch, then the rate stays constant.
pub fn run_phase3_lora<F: Scalar>(model: &mut Model<F>, data: &TrainData<'_>, cfg: &PhaseConfig) -> Result<PhaseMetrics> {
    check(model, data, cfg)?;
    if !model.has_lora() {
        model.attach_lora(cfg.lora_rank, &BlockParam::LINEAR, cfg.seed)?;
    }
    let ce = TrainableSet::adapters(model);
    let spe = data.train.len().div_ceil(cfg.batch_size);
    run_with(model, data, cfg, None, ce, Schedule::WarmupConstant { warmup_steps: spe })
}

/// First `ceil(n/2)` blocks for `cfg.epochs`, then the remaining blocks.
pub fn run_phase3_sequential<F: Scalar>(
    model: &mut Model<F>,
    data: &TrainData<'_>,
    cfg: &PhaseConfig,
) -> Result<PhaseMetrics> {
    check(model, data, cfg)?;
    let n = model.config.n_layers;
    let split = n.div_ceil(2);
    let schedule = Schedule::WarmupLinearDecay { warmup_fraction: cfg.warmup_fraction };
    let mut metrics = PhaseMetrics::start(model, data)?;
    for (layers, first_epoch) in [(0..split, 0), (split..n, cfg.epochs)] {
        let run = Run {
            cfg,
            kl: None,
            ce: TrainableSet::blocks(layers),
            schedule,
        };
        train_epochs(model, data, &run, cfg.epochs, first_epoch, &mut metrics)?;
    }
    Ok(metrics)
}

/// Dispatches on `cfg.phase`.
pub fn run_phase<F: Scalar>(model: &mut Model<F>, data: &TrainData<'_>, cfg: &PhaseConfig) -> Result<PhaseMetrics> {
    match cfg.phase {
        Phase::P1NewModules => run_phase1(model, data, cfg),
        Phase::P2FullEmbedHead => run_phase2(model, data, cfg),
        Phase::P3Lora => run_phase3_lora(model, data, cfg),
        Phase::P3Sequential => run_phase3_sequential(model, data, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Concatenate documents with end-of-text separators and train on
    /// windows at a fresh random offset each epoch, so tokens are seen at
    /// many absolute positions.
    pub packed: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-3,
            warmup_fraction: 0.05,
            seed: 0,
            packed: true,
        }
    }
}

/// Per-epoch losses of a pretraining run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_ce: Vec<f64>,
    /// Empty when no validation sequences were given.
    pub val_ce: Vec<f64>,
}

fn clip(sequences: &[Vec<TokenId>], max_seq: usize) -> Vec<&[TokenId]> {
    sequences
        .iter()
        .map(|s| &s[..s.len().min(max_seq)])
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Training windows of every epoch.
fn pretrain_windows(sequences: &[Vec<TokenId>], cfg: &PretrainConfig, max_seq: usize) -> Vec<Vec<Vec<TokenId>>> {
    if !cfg.packed {
        let docs: Vec<Vec<TokenId>> = clip(sequences, max_seq).into_iter().map(<[TokenId]>::to_vec).collect();
        return (0..cfg.epochs)
            .map(|e| epoch_order(docs.len(), cfg.seed, e).into_iter().map(|i| docs[i].clone()).collect())
            .collect();
    }
    let mut stream = Vec::new();
    for s in sequences {
        stream.extend_from_slice(s);
        stream.push(END_OF_TEXT_ID);
    }
    (0..cfg.epochs)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (e as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            let offset = rng.random_range(0..max_seq.min(stream.len()));
            let mut windows: Vec<Vec<TokenId>> =
                stream[offset..].chunks(max_seq).filter(|w| w.len() >= 2).map(<[TokenId]>::to_vec).collect();
            windows.shuffle(&mut rng);
            windows
        })
        .collect()
}

fn mean_ce<F: Scalar>(model: &Model<F>, seqs: &[&[TokenId]]) -> Result<f64> {
    let mut sum = 0.0;
    for s in seqs {
        let logits = model.forward(s)?;
        sum += ce_terms(s, &logits)?.0.to_f64().unwrap();
    }
    Ok(sum / seqs.len() as f64)
}

/// Next-token training of every parameter on base-tokenized sequences; this
/// produces the toy teacher. Validation CE is recorded after every epoch.
pub fn pretrain<F: Scalar>(
    model: &mut Model<F>,
    sequences: &[Vec<TokenId>],
    validation: &[Vec<TokenId>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let val = clip(validation, model.config.max_seq);
    let epochs = pretrain_windows(sequences, cfg, model.config.max_seq);
    if clip(sequences, model.config.max_seq).is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let all: TrainableSet = model.param_ids().into_iter().collect();
    let mut opt = Adam::new(all.clone(), cfg.learning_rate);
    let schedule = Schedule::WarmupLinearDecay { warmup_fraction: cfg.warmup_fraction };
    let total = epochs.iter().map(Vec::len).sum();
    let mut step = 0;
    let mut report = PretrainReport::default();
    for (epoch, windows) in epochs.iter().enumerate() {
        let mut sum = 0.0;
        for w in windows {
            step += 1;
            opt.set_lr(cfg.learning_rate * lr_at(&schedule, step, total));
            let grads = {
                let mut tape = GradientTape::new(&*model);
                let logits = tape.forward(w)?.clone();
                let (loss, dlogits) = ce_terms(w, &logits)?;
                sum += loss.to_f64().unwrap();
                tape.backward(&dlogits, &all)?
            };
            opt.step(model, &grads)?;
        }
        report.train_ce.push(sum / windows.len() as f64);
        if !val.is_empty() {
            let v = mean_ce(model, &val)?;
            report.val_ce.push(v);
            log::info!("pretrain epoch {}: ce {:.5} val {:.5}", epoch + 1, report.train_ce[epoch], v);
        } else {
            log::info!("pretrain epoch {}: ce {:.5}", epoch + 1, report.train_ce[epoch]);
        }
    }
    Ok(report)
}
