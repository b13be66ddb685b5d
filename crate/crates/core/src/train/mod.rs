//! Staged training: new modules only, full embedding and head, then LoRA or
//! sequential block unfreezing.

mod optim;
mod phases;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, ADAM_BETAS, ADAM_EPS};
pub use phases::{
    accumulated_step, pretrain, prepare_samples, run_phase, run_phase1, run_phase2, run_phase3_lora,
    run_phase3_sequential, PhaseMetrics, PretrainConfig, PretrainReport, TrainData,
};
pub use schedule::{lr_at, Schedule};

use crate::error::{Error, Result};
use crate::init::{EmbeddingInit, HeadInit, InitStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    P1NewModules,
    P2FullEmbedHead,
    P3Lora,
    P3Sequential,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::P1NewModules => "p1",
            Phase::P2FullEmbedHead => "p2",
            Phase::P3Lora => "p3-lora",
            Phase::P3Sequential => "p3-seq",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p1" | "p1_new_modules" => Ok(Phase::P1NewModules),
            "p2" | "p2_full_embed_head" => Ok(Phase::P2FullEmbedHead),
            "p3-lora" | "p3_lora" => Ok(Phase::P3Lora),
            "p3-seq" | "p3_sequential" => Ok(Phase::P3Sequential),
            _ => Err(Error::Config(format!("unknown phase {s:?} (p1|p2|p3-lora|p3-seq)"))),
        }
    }
}

/// Loss used for the embedding extension in the new-modules phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    Ce,
    KlCe,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ce => "ce",
            Objective::KlCe => "klce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub init: InitStrategy,
    pub objective: Objective,
}

impl Strategy {
    /// `random` pairs random embedding and head rows; `mean` pairs mean
    /// embeddings with copy-first head rows.
    pub fn new(embedding: EmbeddingInit, objective: Objective) -> Self {
        let head = match embedding {
            EmbeddingInit::Random => HeadInit::Random,
            EmbeddingInit::Mean => HeadInit::CopyFirst,
        };
        Self {
            init: InitStrategy::new(embedding, head),
            objective,
        }
    }

    /// The four new-modules strategies.
    pub fn matrix() -> [Strategy; 4] {
        [
            Strategy::new(EmbeddingInit::Random, Objective::Ce),
            Strategy::new(EmbeddingInit::Mean, Objective::Ce),
            Strategy::new(EmbeddingInit::Random, Objective::KlCe),
            Strategy::new(EmbeddingInit::Mean, Objective::KlCe),
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.init.embedding, self.objective)
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown strategy {s:?} (random|mean)x(ce|klce), e.g. mean_klce"));
        let (e, o) = s.split_once(['_', '-', 'x', ':', '+']).ok_or_else(bad)?;
        let embedding = e.parse::<EmbeddingInit>().map_err(|_| bad())?;
        let objective = match o {
            "ce" => Objective::Ce,
            "klce" | "kl_ce" | "kl-ce" => Objective::KlCe,
            _ => return Err(bad()),
        };
        Ok(Strategy::new(embedding, objective))
    }
}

/// Settings of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    /// For the sequential phase: epochs per half.
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    /// Samples per update, accumulated one forward at a time.
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub lora_rank: usize,
    /// Restart the schedule and optimizers after this many epochs.
    pub restart_at: Option<usize>,
}

impl PhaseConfig {
    /// Defaults for each phase at toy scale; epochs and learning rates follow
    /// the full-size setup, LoRA rank is scaled down.
    pub fn defaults(phase: Phase) -> Self {
        let (epochs, lr) = match phase {
            Phase::P1NewModules => (12, 4.2e-4),
            Phase::P2FullEmbedHead => (4, 4.2e-4),
            Phase::P3Lora => (4, 2.2e-4),
            Phase::P3Sequential => (1, 4.2e-5),
        };
        Self {
            phase,
            epochs,
            learning_rate: lr,
            warmup_fraction: 0.1,
            batch_size: 1,
            seed: 0,
            strategy: Strategy::new(EmbeddingInit::Mean, Objective::KlCe),
            lora_rank: 4,
            restart_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if let Some(r) = self.restart_at {
            if r == 0 || r >= self.epochs {
                return Err(Error::Config(format!("restart_at {r} must lie strictly inside 1..{}", self.epochs)));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Keys: phase, epochs, lr, warmup, batch,
    /// seed, strategy, head_init, lora_rank, restart_at.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "phase" => self.phase = value.parse()?,
            "epochs" => self.epochs = value.parse().map_err(|_| num(key))?,
            "lr" | "learning_rate" => self.learning_rate = value.parse().map_err(|_| num(key))?,
            "warmup" | "warmup_fraction" => self.warmup_fraction = value.parse().map_err(|_| num(key))?,
            "batch" | "batch_size" => self.batch_size = value.parse().map_err(|_| num(key))?,
            "seed" => self.seed = value.parse().map_err(|_| num(key))?,
            "strategy" => self.strategy = value.parse()?,
            "head_init" => self.strategy.init.head = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "lora_rank" => self.lora_rank = value.parse().map_err(|_| num(key))?,
            "restart_at" => {
                self.restart_at = match value {
                    "" | "none" => None,
                    v => Some(v.parse().map_err(|_| num(key))?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses a `key=value` file; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: origin.to_string(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load_key_values(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    parse_key_values(&std::fs::read_to_string(path)?, &path.display().to_string())
}
