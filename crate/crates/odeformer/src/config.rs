//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are strict: an unknown or repeated key is an error. Lists are
//! comma separated.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use odeformer_core::blocks::{BlockVariant, OdeGranularity};
use odeformer_core::model::{ModelConfig, Position};
use odeformer_core::train::{Precision, TrainConfig};

use crate::tasks::{SeqTask, TaskKind};

/// Task data settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Vocabulary of the synthetic tasks (the LM vocabulary comes from the
    /// corpus).
    pub vocab_size: usize,
    pub seq_min: usize,
    pub seq_max: usize,
    /// LM window length.
    pub seq_len: usize,
    /// `None` selects the bundled corpus.
    pub corpus: Option<PathBuf>,
}

impl TaskConfig {
    pub fn seq_task(&self) -> SeqTask {
        SeqTask {
            reverse: self.kind == TaskKind::Reverse,
            ..SeqTask::copy(self.vocab_size, self.seq_min, self.seq_max)
        }
    }
}

/// Which cells a study runs and how it evaluates them.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub variants: Vec<BlockVariant>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Copy-task evaluation interval in steps.
    pub eval_every: usize,
    /// Copy-task evaluation set: batches and rows per batch.
    pub eval_batches: usize,
    pub eval_rows: usize,
    /// Token accuracy that ends a copy-task run.
    pub target_accuracy: f64,
    /// Write one metrics CSV per trained cell.
    pub metrics: bool,
}

/// Everything a study needs. `model.vocab_size`, `model.enc_depth` and
/// `model.variant` are templates overwritten per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::encoder_decoder(32, 32, 2, 1);
        model.max_len = 64;
        Self {
            model,
            train: TrainConfig {
                peak_lr: 3e-3,
                warmup_steps: 100,
                total_steps: 1000,
                batch_size: 16,
                label_smoothing: 0.0,
                ..TrainConfig::default()
            },
            task: TaskConfig {
                kind: TaskKind::Copy,
                vocab_size: 32,
                seq_min: 5,
                seq_max: 20,
                seq_len: 32,
                corpus: None,
            },
            study: StudyConfig {
                variants: vec![BlockVariant::Euler, BlockVariant::Rk2, BlockVariant::Rk4],
                depths: vec![2],
                seeds: vec![1, 2, 3],
                eval_every: 50,
                eval_batches: 4,
                eval_rows: 32,
                target_accuracy: 0.99,
                metrics: true,
            },
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_kv`] writes them.
pub const KEYS: &[&str] = &[
    "d_model",
    "heads",
    "ffn_dim",
    "depth",
    "dec_depth",
    "granularity",
    "dropout",
    "ln_eps",
    "max_len",
    "tie_embeddings",
    "position",
    "repeats",
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "label_smoothing",
    "clip_norm",
    "precision",
    "log_every",
    "task",
    "vocab_size",
    "seq_min",
    "seq_max",
    "seq_len",
    "corpus",
    "variants",
    "depths",
    "seeds",
    "eval_every",
    "eval_batches",
    "eval_rows",
    "target_accuracy",
    "metrics",
];

/// Parses `key = value` lines into an ordered map, rejecting unknown and
/// duplicate keys.
pub fn parse_kv(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            bail!("line {}: unknown key '{k}'", n + 1);
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            bail!("line {}: key '{k}' given twice", n + 1);
        }
    }
    Ok(out)
}

fn value<T>(key: &str, v: &str) -> anyhow::Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    v.parse().map_err(|e| anyhow!("{key} = {v}: {e}"))
}

fn list<T>(key: &str, v: &str) -> anyhow::Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Vec<T> =
        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| value(key, s)).collect::<anyhow::Result<_>>()?;
    if items.is_empty() {
        bail!("{key} is empty");
    }
    Ok(items)
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies the keys of `text` on top of `self`.
    pub fn apply(mut self, text: &str) -> anyhow::Result<Self> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(self, path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> anyhow::Result<()> {
        let (m, t, task, s) = (&mut self.model, &mut self.train, &mut self.task, &mut self.study);
        match key {
            "d_model" => m.d_model = value(key, v)?,
            "heads" => m.heads = value(key, v)?,
            "ffn_dim" => m.ffn_dim = value(key, v)?,
            "depth" => m.enc_depth = value(key, v)?,
            "dec_depth" => m.dec_depth = value(key, v)?,
            "granularity" => m.granularity = value::<OdeGranularity>(key, v)?,
            "dropout" => m.dropout = value(key, v)?,
            "ln_eps" => m.ln_eps = value(key, v)?,
            "max_len" => m.max_len = value(key, v)?,
            "tie_embeddings" => m.tie_embeddings = value(key, v)?,
            "position" => m.position = value::<Position>(key, v)?,
            "repeats" => m.repeats = value(key, v)?,
            "peak_lr" => t.peak_lr = value(key, v)?,
            "warmup_steps" => t.warmup_steps = value(key, v)?,
            "total_steps" => t.total_steps = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "adam_beta1" => t.adam_beta1 = value(key, v)?,
            "adam_beta2" => t.adam_beta2 = value(key, v)?,
            "adam_eps" => t.adam_eps = value(key, v)?,
            "label_smoothing" => t.label_smoothing = value(key, v)?,
            "clip_norm" => {
                t.clip_norm = match v {
                    "none" | "off" => None,
                    _ => Some(value(key, v)?),
                }
            }
            "precision" => t.precision = value::<Precision>(key, v)?,
            "log_every" => t.log_every = value(key, v)?,
            "task" => task.kind = value(key, v)?,
            "vocab_size" => task.vocab_size = value(key, v)?,
            "seq_min" => task.seq_min = value(key, v)?,
            "seq_max" => task.seq_max = value(key, v)?,
            "seq_len" => task.seq_len = value(key, v)?,
            "corpus" => {
                task.corpus = match v {
                    "bundled" => None,
                    _ => Some(PathBuf::from(v)),
                }
            }
            "variants" => s.variants = list(key, v)?,
            "depths" => s.depths = list(key, v)?,
            "seeds" => s.seeds = list(key, v)?,
            "eval_every" => s.eval_every = value(key, v)?,
            "eval_batches" => s.eval_batches = value(key, v)?,
            "eval_rows" => s.eval_rows = value(key, v)?,
            "target_accuracy" => s.target_accuracy = value(key, v)?,
            "metrics" => s.metrics = value(key, v)?,
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if self.task.kind != TaskKind::CharLm {
            self.task.seq_task().validate()?;
        }
        let s = &self.study;
        if s.variants.is_empty() || s.depths.is_empty() || s.seeds.is_empty() {
            bail!("variants, depths and seeds must be non-empty");
        }
        if s.depths.contains(&0) {
            bail!("depths must be positive");
        }
        if s.eval_every == 0 || s.eval_batches == 0 || s.eval_rows == 0 {
            bail!("eval_every, eval_batches and eval_rows must be positive");
        }
        if !(0.0..=1.0).contains(&s.target_accuracy) {
            bail!("target_accuracy must lie in [0, 1]");
        }
        if self.task.seq_len == 0 {
            bail!("seq_len must be positive");
        }
        Ok(())
    }

    /// Model of one study cell.
    pub fn cell_model(&self, vocab_size: usize, variant: BlockVariant, depth: usize) -> ModelConfig {
        ModelConfig { vocab_size, enc_depth: depth, variant, ..self.model.clone() }
    }

    /// Training settings of one study cell.
    pub fn cell_train(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Serialises every key; `apply` on the output reproduces `self`.
    pub fn to_kv(&self) -> String {
        let (m, t, task, s) = (&self.model, &self.train, &self.task, &self.study);
        let clip = t.clip_norm.map_or("none".to_string(), |c| c.to_string());
        let corpus = task.corpus.as_ref().map_or("bundled".to_string(), |p| p.display().to_string());
        let values: Vec<String> = vec![
            m.d_model.to_string(),
            m.heads.to_string(),
            m.ffn_dim.to_string(),
            m.enc_depth.to_string(),
            m.dec_depth.to_string(),
            m.granularity.to_string(),
            m.dropout.to_string(),
            m.ln_eps.to_string(),
            m.max_len.to_string(),
            m.tie_embeddings.to_string(),
            m.position.to_string(),
            m.repeats.to_string(),
            t.peak_lr.to_string(),
            t.warmup_steps.to_string(),
            t.total_steps.to_string(),
            t.batch_size.to_string(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_eps.to_string(),
            t.label_smoothing.to_string(),
            clip,
            t.precision.to_string(),
            t.log_every.to_string(),
            task.kind.to_string(),
            task.vocab_size.to_string(),
            task.seq_min.to_string(),
            task.seq_max.to_string(),
            task.seq_len.to_string(),
            corpus,
            join(&s.variants),
            join(&s.depths),
            join(&s.seeds),
            s.eval_every.to_string(),
            s.eval_batches.to_string(),
            s.eval_rows.to_string(),
            s.target_accuracy.to_string(),
            s.metrics.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
