//! Staged end-to-end run: corpus, base tokenizer, toy teacher, vocabulary
//! expansion, extension init, then the three training phases for every
//! strategy. Each stage persists its outputs under one run directory and is
//! skipped when its inputs, config and outputs match the manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{EMBEDDING_SIMILARITY_CSV, HEAD_SIMILARITY_CSV};
use crate::corpus::{generate_corpus, load_corpus, CorpusFormat};
use crate::distill::{MetricsTable, TRAIN_CE_CSV, TRAIN_KL_CSV, VAL_CE_CSV, VAL_KL_CSV};
use crate::error::{Error, Result};
use crate::init::{initialize_extension, EmbeddingInit};
use crate::model::{init_base_model, load_checkpoint, save_checkpoint, ModelConfig};
use crate::tokenizer::{
    density_report, escape_token, expand_vocabulary, BpeTokenizer, ExpansionConfig, ExtendedTokenizer, Tokenizer,
};
use crate::train::{pretrain, run_phase, Objective, Phase, PhaseConfig, PretrainConfig, Strategy, TrainData};

pub const MANIFEST_FILE: &str = "manifest.json";

pub const LOSS_CSVS: [&str; 4] = [TRAIN_KL_CSV, TRAIN_CE_CSV, VAL_KL_CSV, VAL_CE_CSV];

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// External corpus; `None` generates the synthetic one.
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    pub n_train: usize,
    pub n_val: usize,
    pub base_vocab_size: usize,
    /// Size of the fresh tokenizer used to find candidates; defaults to twice
    /// the base size, since both are trained on the same corpus.
    pub fresh_vocab_size: Option<usize>,
    pub n_add: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub pretrain: PretrainConfig,
    pub p1: PhaseConfig,
    pub p2: PhaseConfig,
    /// Either the LoRA or the sequential variant.
    pub p3: PhaseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        let phase = |p| PhaseConfig {
            seed,
            ..PhaseConfig::defaults(p)
        };
        Self {
            seed,
            corpus: None,
            corpus_format: CorpusFormat::Plain,
            n_train: 200,
            n_val: 100,
            base_vocab_size: 300,
            fresh_vocab_size: None,
            n_add: 16,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq: 128,
            pretrain: PretrainConfig {
                seed,
                ..PretrainConfig::default()
            },
            p1: phase(Phase::P1NewModules),
            p2: phase(Phase::P2FullEmbedHead),
            p3: phase(Phase::P3Lora),
        }
    }

    /// Applies the same seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.p1.seed = seed;
        self.p2.seed = seed;
        self.p3.seed = seed;
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn fresh_size(&self) -> usize {
        self.fresh_vocab_size.unwrap_or(2 * self.base_vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        if self.n_add == 0 {
            return Err(Error::Config("n_add must be at least 1".into()));
        }
        if self.p1.phase != Phase::P1NewModules || self.p2.phase != Phase::P2FullEmbedHead {
            return Err(Error::Config("p1/p2 hold the wrong phase".into()));
        }
        if !matches!(self.p3.phase, Phase::P3Lora | Phase::P3Sequential) {
            return Err(Error::Config("p3 must be p3-lora or p3-seq".into()));
        }
        for p in [&self.p1, &self.p2, &self.p3] {
            p.validate()?;
        }
        self.model_config(self.base_vocab_size).validate()
    }

    fn model_config(&self, v_orig: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            v_orig,
            v_ext: 0,
        }
    }

    fn phase(&self, slot: Slot) -> &PhaseConfig {
        match slot {
            Slot::P1 => &self.p1,
            Slot::P2 => &self.p2,
            Slot::P3 => &self.p3,
        }
    }
}

/// Training phase position in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    P1,
    P2,
    P3,
}

impl Slot {
    pub fn dir(self) -> &'static str {
        match self {
            Slot::P1 => "p1",
            Slot::P2 => "p2",
            Slot::P3 => "p3",
        }
    }
}

/// A phase-1 strategy, or the baseline that skips phase 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Strategy(Strategy),
    Baseline,
}

impl Variant {
    pub fn all() -> Vec<Variant> {
        let mut v: Vec<Variant> = Strategy::matrix().into_iter().map(Variant::Strategy).collect();
        v.push(Variant::Baseline);
        v
    }

    fn init(self) -> EmbeddingInit {
        match self {
            Variant::Strategy(s) => s.init.embedding,
            Variant::Baseline => EmbeddingInit::Random,
        }
    }

    fn strategy(self) -> Strategy {
        match self {
            Variant::Strategy(s) => s,
            Variant::Baseline => Strategy::new(EmbeddingInit::Random, Objective::Ce),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Strategy(s) => write!(f, "{s}"),
            Variant::Baseline => f.write_str("baseline"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "baseline" {
            Ok(Variant::Baseline)
        } else {
            s.parse().map(Variant::Strategy)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Corpus,
    Tokenizer,
    Teacher,
    Extend,
    Init(EmbeddingInit),
    Train(Slot, Variant),
    /// Merges the per-variant metric files of one phase.
    Report(Slot),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Corpus => f.write_str("corpus"),
            Stage::Tokenizer => f.write_str("tokenizer"),
            Stage::Teacher => f.write_str("teacher"),
            Stage::Extend => f.write_str("extend"),
            Stage::Init(e) => write!(f, "init-{e}"),
            Stage::Train(slot, v) => write!(f, "{}-{v}", slot.dir()),
            Stage::Report(slot) => write!(f, "{}-report", slot.dir()),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown stage {s:?}"));
        Ok(match s {
            "corpus" => Stage::Corpus,
            "tokenizer" => Stage::Tokenizer,
            "teacher" => Stage::Teacher,
            "extend" => Stage::Extend,
            _ => {
                if let Some(e) = s.strip_prefix("init-") {
                    return Ok(Stage::Init(e.parse().map_err(|_| bad())?));
                }
                let (head, rest) = s.split_once('-').ok_or_else(bad)?;
                let slot = match head {
                    "p1" => Slot::P1,
                    "p2" => Slot::P2,
                    "p3" => Slot::P3,
                    _ => return Err(bad()),
                };
                if rest == "report" {
                    Stage::Report(slot)
                } else {
                    let v: Variant = rest.parse().map_err(|_| bad())?;
                    if slot == Slot::P1 && v == Variant::Baseline {
                        return Err(bad());
                    }
                    Stage::Train(slot, v)
                }
            }
        })
    }
}

/// Stages in execution order.
pub fn stage_order() -> Vec<Stage> {
    let mut out = vec![
        Stage::Corpus,
        Stage::Tokenizer,
        Stage::Teacher,
        Stage::Extend,
        Stage::Init(EmbeddingInit::Random),
        Stage::Init(EmbeddingInit::Mean),
    ];
    for slot in [Slot::P1, Slot::P2, Slot::P3] {
        for v in Variant::all() {
            if !(slot == Slot::P1 && v == Variant::Baseline) {
                out.push(Stage::Train(slot, v));
            }
        }
        out.push(Stage::Report(slot));
    }
    out
}

/// Run-directory relative artifact paths.
pub mod paths {
    use super::{Slot, Variant};
    use crate::init::EmbeddingInit;

    pub const TRAIN_CORPUS: &str = "corpus/train.json";
    pub const VAL_CORPUS: &str = "corpus/val.json";
    pub const BASE_TOKENIZER: &str = "tokenizers/base.tok";
    pub const EXT_TOKENIZER: &str = "tokenizers/ext.tok";
    pub const TEACHER: &str = "checkpoints/teacher.ckpt";
    pub const PRETRAIN_METRICS: &str = "metrics/pretrain.csv";
    pub const EXPANSION_REPORT: &str = "reports/expansion.json";

    pub fn init(e: EmbeddingInit) -> String {
        format!("checkpoints/init_{e}.ckpt")
    }

    pub fn checkpoint(slot: Slot, v: Variant) -> String {
        format!("checkpoints/{}_{v}.ckpt", slot.dir())
    }

    pub fn variant_metrics(slot: Slot, v: Variant, file: &str) -> String {
        format!("metrics/{}/{v}/{file}", slot.dir())
    }

    pub fn merged_metrics(slot: Slot, file: &str) -> String {
        format!("metrics/{}/{file}", slot.dir())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// The settings this stage ran with.
    pub config: Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

/// Lineage of every artifact in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == name)
    }

    fn upsert(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|r| r.stage == record.stage) {
            Some(r) => *r = record,
            None => self.stages.push(record),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Every file any stage read or wrote.
    pub fn files(&self) -> BTreeSet<String> {
        self.stages
            .iter()
            .flat_map(|r| r.inputs.iter().chain(&r.outputs).map(|f| f.path.clone()))
            .collect()
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stages re-executed even when up to date.
    pub force: BTreeSet<String>,
    pub force_all: bool,
    /// Stop after this stage.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub ran: Vec<String>,
    pub up_to_date: Vec<String>,
}

pub struct Pipeline {
    dir: PathBuf,
    config: PipelineConfig,
    manifest: RunManifest,
}

/// Paths a stage reads and writes, relative to the run directory unless
/// absolute.
struct StageIo {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_texts(path: &Path, texts: &[String]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(texts)? + "\n")?;
    Ok(())
}

impl Pipeline {
    /// Opens or creates a run directory. A manifest left by an earlier run is
    /// kept so finished stages can be skipped.
    pub fn open(dir: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let stages = if manifest_path.exists() {
            RunManifest::load(&manifest_path)?.stages
        } else {
            Vec::new()
        };
        Ok(Self {
            dir,
            manifest: RunManifest {
                config: config.clone(),
                stages,
            },
            config,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn run(&mut self, opts: &RunOptions) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        for stage in stage_order() {
            let name = stage.to_string();
            let force = opts.force_all || opts.force.contains(&name);
            match self.run_stage(stage, force)? {
                StageOutcome::Ran => summary.ran.push(name),
                StageOutcome::UpToDate => summary.up_to_date.push(name),
            }
            if opts.stop_after == Some(stage) {
                break;
            }
        }
        Ok(summary)
    }

    /// Runs one stage without touching its upstream stages.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let name = stage.to_string();
        let io = self.io(stage);
        let config = self.stage_config(stage);
        let mut inputs = Vec::with_capacity(io.inputs.len());
        for p in &io.inputs {
            let abs = self.path(p);
            if !abs.is_file() {
                return Err(Error::MissingArtifact {
                    stage: name,
                    path: abs,
                });
            }
            inputs.push(FileRecord {
                path: p.clone(),
                sha256: sha256_file(&abs)?,
            });
        }
        if !force && self.up_to_date(&name, &config, &inputs)? {
            log::info!("stage {name}: up to date");
            return Ok(StageOutcome::UpToDate);
        }
        log::info!("stage {name}: running");
        for p in &io.outputs {
            if let Some(parent) = self.path(p).parent() {
                fs::create_dir_all(parent)?;
            }
        }
        self.execute(stage)?;
        let mut outputs = Vec::with_capacity(io.outputs.len());
        for p in &io.outputs {
            outputs.push(FileRecord {
                path: p.clone(),
                sha256: sha256_file(self.path(p))?,
            });
        }
        self.manifest.upsert(StageRecord {
            stage: name,
            config,
            inputs,
            outputs,
        });
        self.save_manifest()?;
        Ok(StageOutcome::Ran)
    }

    fn up_to_date(&self, name: &str, config: &Value, inputs: &[FileRecord]) -> Result<bool> {
        let Some(rec) = self.manifest.stage(name) else { return Ok(false) };
        if rec.config != *config || rec.inputs != inputs {
            return Ok(false);
        }
        for f in &rec.outputs {
            let p = self.path(&f.path);
            if !p.is_file() || sha256_file(&p)? != f.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.path(MANIFEST_FILE), text)?;
        Ok(())
    }

    fn io(&self, stage: Stage) -> StageIo {
        use paths::*;
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let (inputs, outputs) = match stage {
            Stage::Corpus => {
                let inputs = match &self.config.corpus {
                    Some(p) => vec![p.display().to_string()],
                    None => vec![],
                };
                (inputs, s(&[TRAIN_CORPUS, VAL_CORPUS]))
            }
            Stage::Tokenizer => (s(&[TRAIN_CORPUS]), s(&[BASE_TOKENIZER])),
            Stage::Teacher => (
                s(&[TRAIN_CORPUS, VAL_CORPUS, BASE_TOKENIZER]),
                s(&[TEACHER, PRETRAIN_METRICS]),
            ),
            Stage::Extend => (s(&[TRAIN_CORPUS, BASE_TOKENIZER]), s(&[EXT_TOKENIZER, EXPANSION_REPORT])),
            Stage::Init(e) => (s(&[TEACHER, EXT_TOKENIZER]), vec![init(e)]),
            Stage::Train(slot, v) => {
                let upstream = match (slot, v) {
                    (Slot::P1, _) | (Slot::P2, Variant::Baseline) => init(v.init()),
                    (Slot::P2, _) => checkpoint(Slot::P1, v),
                    (Slot::P3, _) => checkpoint(Slot::P2, v),
                };
                let mut inputs = s(&[TRAIN_CORPUS, VAL_CORPUS, BASE_TOKENIZER, EXT_TOKENIZER]);
                inputs.push(upstream);
                let mut outputs = vec![checkpoint(slot, v)];
                for f in Self::variant_files() {
                    outputs.push(variant_metrics(slot, v, f));
                }
                (inputs, outputs)
            }
            Stage::Report(slot) => {
                let mut inputs = Vec::new();
                for v in Self::variants(slot) {
                    for f in LOSS_CSVS {
                        inputs.push(variant_metrics(slot, v, f));
                    }
                }
                let outputs = LOSS_CSVS.iter().map(|f| merged_metrics(slot, f)).collect();
                (inputs, outputs)
            }
        };
        StageIo { inputs, outputs }
    }

    fn variant_files() -> [&'static str; 6] {
        [
            TRAIN_KL_CSV,
            TRAIN_CE_CSV,
            VAL_KL_CSV,
            VAL_CE_CSV,
            EMBEDDING_SIMILARITY_CSV,
            HEAD_SIMILARITY_CSV,
        ]
    }

    /// Variants trained in a phase.
    pub fn variants(slot: Slot) -> Vec<Variant> {
        Variant::all()
            .into_iter()
            .filter(|v| !(slot == Slot::P1 && *v == Variant::Baseline))
            .collect()
    }

    fn stage_config(&self, stage: Stage) -> Value {
        let c = &self.config;
        match stage {
            Stage::Corpus => json!({
                "corpus": c.corpus, "format": c.corpus_format, "n_train": c.n_train, "n_val": c.n_val, "seed": c.seed,
            }),
            Stage::Tokenizer => json!({ "base_vocab_size": c.base_vocab_size }),
            Stage::Teacher => json!({ "model": c.model_config(0), "pretrain": c.pretrain, "seed": c.seed }),
            Stage::Extend => json!({ "n_add": c.n_add, "fresh_vocab_size": c.fresh_size() }),
            Stage::Init(e) => json!({ "init": Strategy::new(e, Objective::Ce).init, "seed": c.seed }),
            Stage::Train(slot, v) => {
                let mut p = c.phase(slot).clone();
                p.strategy = v.strategy();
                json!({ "phase": p, "variant": v.to_string() })
            }
            Stage::Report(slot) => json!({ "phase": slot.dir() }),
        }
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        use paths::*;
        let c = &self.config;
        match stage {
            Stage::Corpus => {
                let docs = match &c.corpus {
                    Some(p) => load_corpus(p, c.corpus_format)?.documents,
                    None => generate_corpus(c.n_train + c.n_val, c.seed),
                };
                if docs.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                let n_train = if docs.len() >= c.n_train + c.n_val {
                    c.n_train
                } else {
                    let n = docs.len() * c.n_train / (c.n_train + c.n_val);
                    log::warn!("corpus has {} documents; using {n} for training", docs.len());
                    n.max(1)
                };
                let n_val = c.n_val.min(docs.len() - n_train);
                write_texts(&self.path(TRAIN_CORPUS), &docs[..n_train])?;
                write_texts(&self.path(VAL_CORPUS), &docs[n_train..n_train + n_val])?;
            }
            Stage::Tokenizer => {
                let train = read_texts(&self.path(TRAIN_CORPUS))?;
                BpeTokenizer::train(&train, c.base_vocab_size)?.save(self.path(BASE_TOKENIZER))?;
            }
            Stage::Teacher => {
                let base = BpeTokenizer::load(self.path(BASE_TOKENIZER))?;
                let enc = |p: &str| -> Result<Vec<Vec<u32>>> {
                    Ok(read_texts(&self.path(p))?.iter().map(|d| base.encode(d)).collect())
                };
                let (train, val) = (enc(TRAIN_CORPUS)?, enc(VAL_CORPUS)?);
                let mut model = init_base_model::<f32>(c.model_config(base.vocab_size()), c.seed)?;
                let report = pretrain(&mut model, &train, &val, &c.pretrain)?;
                save_checkpoint(&model, self.path(TEACHER))?;
                let mut table = MetricsTable::default();
                let pad = |v: &[f64]| std::iter::once(f64::NAN).chain(v.iter().copied()).collect::<Vec<_>>();
                table.push_column("train_ce", &pad(&report.train_ce));
                table.push_column("val_ce", &pad(&report.val_ce));
                table.write(self.path(PRETRAIN_METRICS))?;
            }
            Stage::Extend => {
                let base = BpeTokenizer::load(self.path(BASE_TOKENIZER))?;
                let train = read_texts(&self.path(TRAIN_CORPUS))?;
                let cfg = ExpansionConfig {
                    n_add: c.n_add,
                    fresh_vocab_size: Some(c.fresh_size()),
                };
                let (ext, report) = expand_vocabulary(&base, &train, &cfg)?;
                let (before, after) = density_report(&ext, &train);
                log::info!("tokens per document: {before:.2} -> {after:.2}");
                ext.save(self.path(EXT_TOKENIZER))?;
                let tokens = |v: &[Vec<u8>]| v.iter().map(|t| escape_token(t)).collect::<Vec<_>>();
                let summary = json!({
                    "added": tokens(&report.added),
                    "ranked": report.ranked.iter().map(|(t, n)| json!([escape_token(t), n])).collect::<Vec<_>>(),
                    "dropped_numeric": tokens(&report.dropped_numeric),
                    "dropped_substring": tokens(&report.dropped_substring),
                    "dropped_duplicate": tokens(&report.dropped_duplicate),
                    "tokens_per_document": { "base": before, "extended": after },
                });
                fs::write(self.path(EXPANSION_REPORT), serde_json::to_string_pretty(&summary)? + "\n")?;
            }
            Stage::Init(e) => {
                let mut model = load_checkpoint(self.path(TEACHER))?;
                let ext = ExtendedTokenizer::load(self.path(EXT_TOKENIZER))?;
                initialize_extension(&mut model, &ext, Strategy::new(e, Objective::Ce).init, c.seed)?;
                save_checkpoint(&model, self.path(&init(e)))?;
            }
            Stage::Train(slot, v) => {
                let io = self.io(stage);
                let upstream = io.inputs.last().expect("upstream checkpoint");
                let mut model = load_checkpoint(self.path(upstream))?;
                let base = BpeTokenizer::load(self.path(BASE_TOKENIZER))?;
                let ext = ExtendedTokenizer::load(self.path(EXT_TOKENIZER))?;
                let train = read_texts(&self.path(TRAIN_CORPUS))?;
                let val = read_texts(&self.path(VAL_CORPUS))?;
                let data = TrainData::new(&base, &ext, &train, &val, model.config.max_seq)?;
                let mut cfg = c.phase(slot).clone();
                cfg.strategy = v.strategy();
                let metrics = run_phase(&mut model, &data, &cfg)?;
                save_checkpoint(&model, self.path(&checkpoint(slot, v)))?;
                let dir = self.path(&variant_metrics(slot, v, ""));
                metrics.write_dir(&dir, &v.to_string())?;
            }
            Stage::Report(slot) => {
                for f in LOSS_CSVS {
                    let mut merged = MetricsTable::default();
                    for v in Self::variants(slot) {
                        let t = MetricsTable::read(self.path(&variant_metrics(slot, v, f)))?;
                        let name = v.to_string();
                        let col = t.column(&name).ok_or_else(|| Error::Format {
                            path: variant_metrics(slot, v, f),
                            line: 1,
                            msg: format!("missing column {name}"),
                        })?;
                        merged.push_column(name, &col);
                    }
                    merged.write(self.path(&merged_metrics(slot, f)))?;
                }
                if slot == Slot::P1 {
                    log_kl_direction(&self.path(&merged_metrics(slot, TRAIN_KL_CSV)))?;
                }
            }
        }
        Ok(())
    }
}

/// Reports the first-to-last train KL change of every strategy; CE-only
/// strategies are expected to be able to raise it.
fn log_kl_direction(path: &Path) -> Result<()> {
    let t = MetricsTable::read(path)?;
    for name in &t.columns {
        let col = t.column(name).unwrap_or_default();
        if let (Some(first), Some(last)) = (col.first(), col.last()) {
            let dir = if last > first { "increased" } else { "decreased" };
            log::info!("phase 1 {name}: train KL {dir} {first:.4} -> {last:.4}");
        }
    }
    Ok(())
}
