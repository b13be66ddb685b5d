use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vdistill::alignment::map_token_texts;
use vdistill::analysis::{model_similarity, SimilarityReport, Which};
use vdistill::corpus::{generate_corpus, load_corpus, write_plain, CorpusFormat};
use vdistill::init::{initialize_extension, EmbeddingInit, HeadInit, InitStrategy};
use vdistill::model::{init_base_model, load_checkpoint, save_checkpoint, ModelConfig};
use vdistill::pipeline::{Pipeline, PipelineConfig, RunOptions, Stage};
use vdistill::tokenizer::{
    density_report, escape_token, expand_vocabulary, load_any, BpeTokenizer, ExpansionConfig, ExtendedTokenizer,
    Tokenizer,
};
use vdistill::train::{load_key_values, pretrain, run_phase, Phase, PhaseConfig, PretrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "vdistill", version, about = "Vocabulary expansion with self-distilled embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE tokenizer.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        format: FormatArg,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add the most frequent domain tokens to a base tokenizer.
    ExtendVocab {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        format: FormatArg,
        #[arg(long)]
        add: usize,
        /// Vocabulary size of the fresh domain tokenizer (default: base size).
        #[arg(long)]
        fresh_vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print token ids, space separated.
    Tokenize {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Print the similar and divergent mappings between both tokenizations.
    Align {
        #[arg(long)]
        tokenizer_base: PathBuf,
        #[arg(long)]
        tokenizer_ext: PathBuf,
        #[arg(long)]
        file: PathBuf,
    },
    /// Pre-train a toy base model on base-tokenized documents.
    Pretrain {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        format: FormatArg,
        #[arg(long)]
        val_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[arg(long, default_value_t = 128)]
        max_seq: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add initialized extension rows to a checkpoint.
    InitExtension {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer_ext: PathBuf,
        #[arg(long, default_value = "mean")]
        embed: EmbeddingInit,
        #[arg(long, default_value = "copy-first")]
        head: HeadInit,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training phase.
    Train(TrainArgs),
    /// Cosine similarity of extension rows to their subtoken rows.
    AnalyzeSimilarity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer_base: Option<PathBuf>,
        #[arg(long)]
        tokenizer_ext: PathBuf,
        #[arg(long, default_value = "embedding")]
        which: Which,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run or resume the staged end-to-end pipeline.
    Pipeline(PipelineArgs),
    /// Write the synthetic code-like corpus.
    GenCorpus {
        #[arg(long, default_value_t = 300)]
        docs: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Copy)]
struct FormatArg {
    /// Corpus layout: plain (blank-line separated) or paired (query<TAB>answer).
    #[arg(id = "format", long = "format", default_value = "plain")]
    value: CorpusFormat,
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    #[arg(id = "seed", long = "seed", env = "VDISTILL_SEED", default_value_t = 0)]
    value: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    phase: Option<Phase>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer_base: Option<PathBuf>,
    #[arg(long)]
    tokenizer_ext: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    format: FormatArg,
    #[arg(long)]
    val_corpus: Option<PathBuf>,
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, env = "VDISTILL_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    restart_at: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Run directory; holds every artifact and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "VDISTILL_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    add: Option<usize>,
    #[arg(long)]
    p1_epochs: Option<usize>,
    #[arg(long)]
    p2_epochs: Option<usize>,
    #[arg(long)]
    p3_epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Use sequential unfreezing instead of LoRA for the last phase.
    #[arg(long)]
    sequential: bool,
    /// Re-run this stage even if it is up to date (repeatable).
    #[arg(long)]
    rerun: Vec<String>,
    #[arg(long)]
    rerun_all: bool,
    /// Run only this stage; upstream artifacts must exist.
    #[arg(long, conflicts_with = "stop_after")]
    stage: Option<Stage>,
    #[arg(long)]
    stop_after: Option<Stage>,
    /// Print the stage names and exit.
    #[arg(long)]
    list_stages: bool,
}

fn read_corpus(path: &Path, format: FormatArg) -> Result<Vec<String>> {
    Ok(load_corpus(path, format.value)
        .with_context(|| format!("reading corpus {}", path.display()))?
        .documents)
}

fn base_of(explicit: Option<&Path>, ext: &ExtendedTokenizer) -> Result<BpeTokenizer> {
    match explicit {
        Some(p) => {
            let base = BpeTokenizer::load(p).with_context(|| format!("reading {}", p.display()))?;
            if base.tokens() != ext.base().tokens() {
                bail!("{} is not the base of the extended tokenizer", p.display());
            }
            Ok(base)
        }
        None => Ok(ext.base().clone()),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut kv = match &args.config {
        Some(p) => load_key_values(p)?,
        None => Default::default(),
    };
    let set = |kv: &mut std::collections::BTreeMap<String, String>, k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    set(&mut kv, "phase", args.phase.map(|p| p.to_string()));
    set(&mut kv, "strategy", args.strategy.clone());
    set(&mut kv, "epochs", args.epochs.map(|v| v.to_string()));
    set(&mut kv, "lr", args.lr.map(|v| v.to_string()));
    set(&mut kv, "warmup", args.warmup.map(|v| v.to_string()));
    set(&mut kv, "batch", args.batch.map(|v| v.to_string()));
    set(&mut kv, "seed", args.seed.map(|v| v.to_string()));
    set(&mut kv, "lora_rank", args.lora_rank.map(|v| v.to_string()));
    set(&mut kv, "restart_at", args.restart_at.map(|v| v.to_string()));
    let phase: Phase = kv
        .get("phase")
        .context("--phase (or phase= in the config file) is required")?
        .parse()?;
    let mut cfg = PhaseConfig::defaults(phase);
    for (k, v) in &kv {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;

    let ext = ExtendedTokenizer::load(&args.tokenizer_ext)?;
    let base = base_of(args.tokenizer_base.as_deref(), &ext)?;
    let train = read_corpus(&args.corpus, args.format)?;
    let val = match &args.val_corpus {
        Some(p) => read_corpus(p, args.format)?,
        None => Vec::new(),
    };
    let mut model = load_checkpoint(&args.model)?;
    let data = TrainData::new(&base, &ext, &train, &val, model.config.max_seq)?;
    log::info!(
        "{} {}: {} train / {} val samples",
        cfg.phase,
        cfg.strategy,
        data.train.len(),
        data.val.len()
    );
    let metrics = run_phase(&mut model, &data, &cfg)?;
    save_checkpoint(&model, &args.out)?;
    if let Some(dir) = &args.metrics_dir {
        metrics.write_dir(dir, &cfg.strategy.to_string())?;
    }
    println!(
        "train kl {:.5} -> {:.5}, ce {:.5} -> {:.5}",
        metrics.train_kl[0],
        metrics.train_kl.last().unwrap(),
        metrics.train_ce[0],
        metrics.train_ce.last().unwrap()
    );
    Ok(())
}

fn pipeline(args: PipelineArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(c) = args.corpus {
        cfg.corpus = Some(c);
    }
    if let Some(f) = args.format {
        cfg.corpus_format = f;
    }
    let fields = [
        (&mut cfg.n_train, args.n_train),
        (&mut cfg.n_val, args.n_val),
        (&mut cfg.n_add, args.add),
        (&mut cfg.p1.epochs, args.p1_epochs),
        (&mut cfg.p2.epochs, args.p2_epochs),
        (&mut cfg.pretrain.epochs, args.pretrain_epochs),
    ];
    for (field, value) in fields {
        if let Some(v) = value {
            *field = v;
        }
    }
    if args.sequential {
        let seed = cfg.p3.seed;
        cfg.p3 = PhaseConfig {
            seed,
            ..PhaseConfig::defaults(Phase::P3Sequential)
        };
    }
    if let Some(e) = args.p3_epochs {
        cfg.p3.epochs = e;
    }
    if args.list_stages {
        for s in vdistill::pipeline::stage_order() {
            println!("{s}");
        }
        return Ok(());
    }
    let mut p = Pipeline::open(&args.out, cfg)?;
    if let Some(stage) = args.stage {
        let outcome = p.run_stage(stage, args.rerun_all || args.rerun.contains(&stage.to_string()))?;
        println!("{stage}: {outcome:?}");
        return Ok(());
    }
    for name in &args.rerun {
        name.parse::<Stage>()?;
    }
    let opts = RunOptions {
        force: args.rerun.into_iter().collect::<BTreeSet<_>>(),
        force_all: args.rerun_all,
        stop_after: args.stop_after,
    };
    let summary = p.run(&opts)?;
    println!(
        "{} stages ran, {} up to date; manifest at {}",
        summary.ran.len(),
        summary.up_to_date.len(),
        p.dir().join(vdistill::pipeline::MANIFEST_FILE).display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTokenizer {
            corpus,
            format,
            vocab_size,
            out,
        } => {
            let docs = read_corpus(&corpus, format)?;
            let tok = BpeTokenizer::train(&docs, vocab_size)?;
            tok.save(&out)?;
            println!("{} tokens, {} merges", tok.vocab_size(), tok.merges().len());
        }
        Command::ExtendVocab {
            base,
            corpus,
            format,
            add,
            fresh_vocab_size,
            out,
        } => {
            let base = BpeTokenizer::load(&base)?;
            let docs = read_corpus(&corpus, format)?;
            let cfg = ExpansionConfig {
                n_add: add,
                fresh_vocab_size,
            };
            let (ext, report) = expand_vocabulary(&base, &docs, &cfg)?;
            ext.save(&out)?;
            let (before, after) = density_report(&ext, &docs);
            for t in &report.added {
                println!("{}", escape_token(t));
            }
            println!("tokens per document: {before:.2} -> {after:.2}");
        }
        Command::Tokenize { tokenizer, text, file } => {
            let text = match (text, file) {
                (Some(t), _) => t,
                (None, Some(f)) => fs::read_to_string(f)?,
                (None, None) => unreachable!("clap requires --text or --file"),
            };
            let tok = load_any(&tokenizer)?.into_extended();
            let ids: Vec<String> = tok.encode(&text).iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
        }
        Command::Align {
            tokenizer_base,
            tokenizer_ext,
            file,
        } => {
            let ext = ExtendedTokenizer::load(&tokenizer_ext)?;
            let base = base_of(Some(&tokenizer_base), &ext)?;
            let text = fs::read_to_string(&file)?;
            let map = map_token_texts(&base.encode(&text), &ext.encode(&text), &base, &ext)?;
            print!("{map}");
        }
        Command::Pretrain {
            tokenizer,
            corpus,
            format,
            val_corpus,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq,
            epochs,
            lr,
            seed,
            out,
        } => {
            let base = BpeTokenizer::load(&tokenizer)?;
            let enc = |docs: Vec<String>| docs.iter().map(|d| base.encode(d)).collect::<Vec<_>>();
            let train = enc(read_corpus(&corpus, format)?);
            let val = match &val_corpus {
                Some(p) => enc(read_corpus(p, format)?),
                None => Vec::new(),
            };
            let config = ModelConfig {
                d_model,
                n_layers,
                n_heads,
                d_ff,
                max_seq,
                v_orig: base.vocab_size(),
                v_ext: 0,
            };
            let mut model = init_base_model::<f32>(config, seed.value)?;
            let cfg = PretrainConfig {
                epochs,
                learning_rate: lr,
                seed: seed.value,
                ..PretrainConfig::default()
            };
            let report = pretrain(&mut model, &train, &val, &cfg)?;
            save_checkpoint(&model, &out)?;
            if let Some(last) = report.train_ce.last() {
                println!("final train ce {last:.5}");
            }
        }
        Command::InitExtension {
            model,
            tokenizer_ext,
            embed,
            head,
            seed,
            out,
        } => {
            let mut m = load_checkpoint(&model)?;
            if m.config.v_ext != 0 {
                bail!("{} already has {} extension rows", model.display(), m.config.v_ext);
            }
            let ext = ExtendedTokenizer::load(&tokenizer_ext)?;
            initialize_extension(&mut m, &ext, InitStrategy::new(embed, head), seed.value)?;
            save_checkpoint(&m, &out)?;
        }
        Command::Train(args) => train(args)?,
        Command::AnalyzeSimilarity {
            model,
            tokenizer_base,
            tokenizer_ext,
            which,
            out,
        } => {
            let m = load_checkpoint(&model)?;
            let ext = ExtendedTokenizer::load(&tokenizer_ext)?;
            base_of(tokenizer_base.as_deref(), &ext)?;
            let entry = model_similarity(&m, &ext, which)?;
            let mut report = SimilarityReport::default();
            report.push(0, entry);
            report.write(&out)?;
            println!(
                "{which}: first {:.4} intermediate {} last {:.4} over {} tokens",
                entry.mean_first,
                entry.mean_intermediate.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                entry.mean_last,
                entry.n_tokens
            );
        }
        Command::Pipeline(args) => pipeline(args)?,
        Command::GenCorpus { docs, seed, out } => {
            write_plain(&generate_corpus(docs, seed.value), &out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
